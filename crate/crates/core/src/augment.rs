//! Triplet-level feature augmentation and the multi-view feature groups.
//!
//! For an account type `t`, the three relations whose source is `t` each
//! own a pre-trained CVAE. Each view holds one generated matrix per such
//! relation (`n_t x 14`), plus the shared initial feature matrix.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::cvae::{pretrain_pairs, CvaeConfig, LatentSource, PairSet, TripletCvae};
use crate::error::{Error, Result};
use crate::features::{account_features, FeatureVector, FEATURE_DIM};
use crate::heig::{AccountType, Heig, TripletRelation};
use crate::io::{read_feature_matrix, write_feature_matrix};

pub fn relations_for(kind: AccountType) -> [TripletRelation; 3] {
    match kind {
        AccountType::Ca => [TripletRelation::RccC, TripletRelation::RccT, TripletRelation::RceT],
        AccountType::Eoa => [TripletRelation::RecC, TripletRelation::RecT, TripletRelation::ReeT],
    }
}

/// One `(x_v, x_u)` pair per edge of `relation`, `v` being the source.
/// Uses the features stored on the accounts, computing them if absent.
pub fn collect_pairs(g: &Heig, relation: TripletRelation) -> Vec<(FeatureVector, FeatureVector)> {
    let feature = |id: &str| {
        g.account(id)
            .and_then(|a| a.features)
            .unwrap_or_else(|| account_features(g, id).expect("edge endpoint exists"))
    };
    g.relation(relation)
        .edges
        .iter()
        .map(|&e| {
            let edge = &g.edges()[e];
            (feature(&edge.src), feature(&edge.dst))
        })
        .collect()
}

/// Same pairs as [`collect_pairs`], read from per-type feature matrices
/// (for example standardized ones).
pub fn pair_set(g: &Heig, relation: TripletRelation, features: &[Array2<f64>; 2]) -> PairSet {
    let index = g.relation(relation);
    let src = &features[relation.src().index()];
    let dst = &features[relation.dst().index()];
    PairSet {
        target: src.select(ndarray::Axis(0), &index.src),
        neighbor: dst.select(ndarray::Axis(0), &index.dst),
    }
}

/// Pre-trains one CVAE per relation on standardized features. Relation
/// `r` uses seed `config.seed + r.index()`.
pub fn pretrain_relations(
    g: &Heig,
    features: &[Array2<f64>; 2],
    config: &CvaeConfig,
) -> Result<BTreeMap<TripletRelation, TripletCvae>> {
    TripletRelation::ALL
        .into_iter()
        .map(|r| {
            let cfg = CvaeConfig { seed: config.seed.wrapping_add(r.index() as u64), ..config.clone() };
            Ok((r, pretrain_pairs(r, &pair_set(g, r, features), &cfg)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroupSet {
    /// Initial features per type, shared by every view.
    pub initial: [Array2<f64>; 2],
    /// `views[m][t][i]` is the generated matrix of view `m` for account type
    /// `t` and relation `relations_for(t)[i]`. Empty when augmentation is off.
    pub views: Vec<[Vec<Array2<f64>>; 2]>,
}

impl FeatureGroupSet {
    /// Groups holding only the initial features (augmentation disabled).
    pub fn initial_only(initial: [Array2<f64>; 2]) -> Self {
        FeatureGroupSet { initial, views: Vec::new() }
    }

    pub fn is_augmented(&self) -> bool {
        !self.views.is_empty()
    }

    /// Number of views the model iterates over (1 without augmentation).
    pub fn view_count(&self) -> usize {
        self.views.len().max(1)
    }

    pub fn rows(&self, kind: AccountType) -> usize {
        self.initial[kind.index()].nrows()
    }

    /// Members of one view in concatenation order: the three generated
    /// matrices, then the initial features.
    pub fn members(&self, view: usize, kind: AccountType) -> Vec<&Array2<f64>> {
        let t = kind.index();
        let mut out: Vec<&Array2<f64>> = match self.views.get(view) {
            Some(v) => v[t].iter().collect(),
            None => Vec::new(),
        };
        out.push(&self.initial[t]);
        out
    }

    /// The first `m` views.
    pub fn truncated(&self, m: usize) -> Self {
        FeatureGroupSet {
            initial: self.initial.clone(),
            views: self.views.iter().take(m).cloned().collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        for kind in AccountType::ALL {
            let n = self.rows(kind);
            for view in 0..self.view_count() {
                for m in self.members(view, kind) {
                    if m.dim() != (n, FEATURE_DIM) {
                        return Err(Error::ShapeMismatch {
                            context: "feature group member",
                            expected: (n, FEATURE_DIM),
                            actual: m.dim(),
                        });
                    }
                    if m.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite("feature group member"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds `views` views of generated features. Latents are drawn view by
/// view, CA before EOA, relations in [`relations_for`] order.
pub fn augment_features(
    initial: [Array2<f64>; 2],
    models: &BTreeMap<TripletRelation, TripletCvae>,
    views: usize,
    latents: &mut dyn LatentSource,
) -> Result<FeatureGroupSet> {
    if views == 0 {
        return Err(Error::Config("number of views must be at least 1".into()));
    }
    for r in TripletRelation::ALL {
        if !models.contains_key(&r) {
            return Err(Error::MissingModel(r.to_string()));
        }
    }
    let mut out = Vec::with_capacity(views);
    for _ in 0..views {
        let mut per_type: [Vec<Array2<f64>>; 2] = [Vec::new(), Vec::new()];
        for kind in AccountType::ALL {
            for r in relations_for(kind) {
                let generated = models[&r].generate_batch(&initial[kind.index()], latents)?;
                per_type[kind.index()].push(generated);
            }
        }
        out.push(per_type);
    }
    let groups = FeatureGroupSet { initial, views: out };
    groups.check()?;
    Ok(groups)
}

pub fn augment_file_name(kind: AccountType, relation: TripletRelation, view: usize) -> String {
    format!("aug_{kind}_{relation}_v{view}.csv")
}

pub fn initial_file_name(kind: AccountType) -> String {
    format!("initial_{kind}.csv")
}

pub fn write_groups(dir: &Path, g: &Heig, groups: &FeatureGroupSet) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for kind in AccountType::ALL {
        let name = initial_file_name(kind);
        write_feature_matrix(&dir.join(&name), g.ids(kind), &groups.initial[kind.index()])?;
        written.push(name);
        for (v, view) in groups.views.iter().enumerate() {
            for (i, r) in relations_for(kind).into_iter().enumerate() {
                let name = augment_file_name(kind, r, v);
                write_feature_matrix(&dir.join(&name), g.ids(kind), &view[kind.index()][i])?;
                written.push(name);
            }
        }
    }
    Ok(written)
}

pub fn read_groups(dir: &Path, g: &Heig, views: usize) -> Result<FeatureGroupSet> {
    let load = |name: String, kind: AccountType| -> Result<Array2<f64>> {
        let path = dir.join(&name);
        if !path.exists() {
            return Err(Error::MissingUpstream(path.display().to_string()));
        }
        let (ids, m) = read_feature_matrix(&path)?;
        if ids != g.ids(kind) {
            return Err(Error::Config(format!("{name}: account ids do not match the graph")));
        }
        Ok(m)
    };
    let initial = [
        load(initial_file_name(AccountType::Ca), AccountType::Ca)?,
        load(initial_file_name(AccountType::Eoa), AccountType::Eoa)?,
    ];
    let mut out = Vec::with_capacity(views);
    for v in 0..views {
        let mut per_type: [Vec<Array2<f64>>; 2] = [Vec::new(), Vec::new()];
        for kind in AccountType::ALL {
            for r in relations_for(kind) {
                per_type[kind.index()].push(load(augment_file_name(kind, r, v), kind)?);
            }
        }
        out.push(per_type);
    }
    Ok(FeatureGroupSet { initial, views: out })
}
