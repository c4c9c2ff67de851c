//! Per-layer compression: SDD, optional weight recovery, optional balancing.

use std::fmt::Write as _;

use crate::balancing::balance;
use crate::cost::{choose_k, KPolicy};
use crate::error::{FfnError, Result};
use crate::layers::{GroupFactors, Model, ModelLayer};
use crate::recovery::{recover, RecoveryOptions};
use crate::sdd::{sdd_decompose, SddOptions};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizeOptions {
    pub k_policy: KPolicy,
    /// SDD settings; `k` and `seed` are filled in per group.
    pub sdd: SddOptions,
    /// `None` keeps `float(X)`, `float(Y)` as the fine-tuning start.
    pub recovery: Option<RecoveryOptions>,
    pub balance: bool,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        FactorizeOptions {
            k_policy: KPolicy::Rule(crate::cost::KRule::Min),
            sdd: SddOptions::new(1),
            recovery: Some(RecoveryOptions::default()),
            balance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: usize,
    pub k: usize,
    /// `||W - X D Y^T||^2 / ||W||^2` of the ternary factors.
    pub r_sdd: f64,
    /// Same ratio for `X^ D Y^^T`, when recovery ran.
    pub r_recovered: Option<f64>,
    pub w_norm_sq: f64,
    pub sdd_history: Vec<f64>,
    pub recovery_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub index: usize,
    pub name: String,
    pub groups: Vec<GroupReport>,
}

/// Seed for one group, independent of the order layers are processed in.
pub fn group_seed(seed: u64, layer: usize, group: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [layer as u64, group as u64] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29) ^ 0xd6e8_feb8_6659_fd93;
    }
    h
}

fn ratio(err: f64, norm: f64) -> f64 {
    if norm > 0.0 { err / norm } else if err == 0.0 { 0.0 } else { f64::INFINITY }
}

pub fn factorize_group(w: &DenseMatrix, k: usize, opts: &FactorizeOptions, seed: u64) -> Result<(GroupFactors, GroupReport)> {
    let sdd_opts = SddOptions { k, seed, ..opts.sdd.clone() };
    let sdd = sdd_decompose(w, &sdd_opts)?;
    let w_norm_sq = w.frobenius_sq();
    let (x_hat, y_hat, recovery_history) = match &opts.recovery {
        Some(ro) => {
            let rec = recover(w, &sdd.x, &sdd.d, &sdd.y, ro)?;
            let h = rec.objective_history.clone();
            (rec.x_hat, rec.y_hat, h)
        }
        None => (sdd.x.to_dense(), sdd.y.to_dense(), Vec::new()),
    };
    let r_recovered = opts.recovery.as_ref().map(|_| ratio(*recovery_history.last().unwrap(), w_norm_sq));
    let factors = if opts.balance {
        GroupFactors::from_balanced(&balance(&x_hat, &sdd.d, &y_hat)?)?
    } else {
        let mut g = GroupFactors::new(sdd.x.clone(), sdd.d.clone(), sdd.y.clone())?;
        g.accumulators = Some((x_hat, y_hat));
        g
    };
    let report = GroupReport {
        group: 0,
        k,
        r_sdd: ratio(sdd.final_residual().powi(2), w_norm_sq),
        r_recovered,
        w_norm_sq,
        sdd_history: sdd.residual_history,
        recovery_history,
    };
    Ok((factors, report))
}

fn in_layer(e: FfnError, label: &str) -> FfnError {
    match e {
        FfnError::Size(m) => FfnError::Size(format!("layer {label}: {m}")),
        FfnError::Domain(m) => FfnError::Domain(format!("layer {label}: {m}")),
        FfnError::Config(m) => FfnError::Config(format!("layer {label}: {m}")),
        FfnError::Data(m) => FfnError::Data(format!("layer {label}: {m}")),
        other => other,
    }
}

/// Factorizes every group of one layer. Dense weights are kept alongside.
pub fn factorize_layer(index: usize, layer: &ModelLayer, opts: &FactorizeOptions) -> Result<(ModelLayer, LayerReport)> {
    let label = layer.descriptor.label();
    let run = || -> Result<(ModelLayer, LayerReport)> {
        let weights = layer.dense_weights()?;
        let k = choose_k(&layer.descriptor, &opts.k_policy)?;
        let mut groups = Vec::with_capacity(weights.len());
        let mut reports = Vec::with_capacity(weights.len());
        for (g, w) in weights.iter().enumerate() {
            let (f, mut r) = factorize_group(w, k, opts, group_seed(opts.sdd.seed, index, g))?;
            r.group = g;
            groups.push(f);
            reports.push(r);
        }
        let mut out = ModelLayer { weights: Some(weights), ..layer.clone() };
        out.set_factors(groups)?;
        Ok((out, LayerReport { index, name: label.clone(), groups: reports }))
    };
    run().map_err(|e| in_layer(e, &label))
}

pub fn factorize_model(model: &Model, opts: &FactorizeOptions) -> Result<(Model, Vec<LayerReport>)> {
    let results = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| factorize_layer(i, l, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(model, results))
}

/// Rebuilds a model from per-layer results given in layer order.
pub fn assemble(model: &Model, results: Vec<(ModelLayer, LayerReport)>) -> (Model, Vec<LayerReport>) {
    let (layers, reports) = results.into_iter().unzip();
    (Model { input: model.input, layers }, reports)
}

pub fn reports_csv(reports: &[LayerReport]) -> String {
    let mut out = String::from("layer,group,k,r_sdd,r_recovered\n");
    for l in reports {
        for g in &l.groups {
            let rec = g.r_recovered.map_or(String::new(), |r| format!("{r:?}"));
            let _ = writeln!(out, "{},{},{},{:?},{}", l.name, g.group, g.k, g.r_sdd, rec);
        }
    }
    out
}

/// SDD residual history of every group, `layer,group,iteration,residual,r`.
pub fn histories_csv(reports: &[LayerReport]) -> String {
    let mut out = String::from("layer,group,iteration,residual,r\n");
    for l in reports {
        for g in &l.groups {
            for (i, &res) in g.sdd_history.iter().enumerate() {
                let _ = writeln!(out, "{},{},{i},{res:?},{:?}", l.name, g.group, ratio(res * res, g.w_norm_sq));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::KRule;
    use crate::layers::{forward_ffn, Activation, FeatureShape};
    use crate::recovery::quantize;
    use crate::tensor::{LayerDescriptor, TernaryMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = |r, c| DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let conv = LayerDescriptor::conv(3, 3, 2, 4, 3, 3, 2).named("c1");
        let fc = LayerDescriptor::fc(36, 3).named("fc");
        Model {
            input: Some(FeatureShape::new(5, 5, 2)),
            layers: vec![
                ModelLayer::dense(conv, vec![w(9, 2), w(9, 2)], None, Activation::Relu).unwrap(),
                ModelLayer::dense(fc, vec![w(36, 3)], Some(vec![0.1; 3]), Activation::None).unwrap(),
            ],
        }
    }

    #[test]
    fn factorized_model_runs_and_reports() {
        let m = model(1);
        let (f, reports) = factorize_model(&m, &FactorizeOptions::default()).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].groups.len(), 2);
        for r in reports.iter().flat_map(|l| &l.groups) {
            assert!(r.r_sdd < 1.0);
            assert!(r.r_recovered.unwrap() <= r.r_sdd + 1e-6);
        }
        for l in &f.layers {
            for g in l.factors.as_ref().unwrap() {
                let (xa, ya) = g.accumulators.as_ref().unwrap();
                assert_eq!(quantize(&xa.scaled((1.0 / g.lambda_x) as f32)).matrix, g.x);
                assert_eq!(quantize(&ya.scaled((1.0 / g.lambda_y) as f32)).matrix, g.y);
            }
        }
        let out = forward_ffn(&f, &vec![0.5; 50]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(reports_csv(&reports).lines().count(), 4);
        assert!(histories_csv(&reports).lines().count() > 4);
    }

    #[test]
    fn rank_one_ternary_is_exact() {
        let x = TernaryMatrix::from_values(3, 1, &[1, 0, -1]).unwrap();
        let y = TernaryMatrix::from_values(2, 1, &[1, 1]).unwrap();
        let w = x.to_dense().matmul(&y.to_dense().transpose()).unwrap().scaled(0.7);
        let layer = ModelLayer::dense(LayerDescriptor::fc(3, 2), vec![w], None, Activation::None).unwrap();
        let opts = FactorizeOptions { k_policy: KPolicy::Rule(KRule::Fixed(1)), ..FactorizeOptions::default() };
        let (_, r) = factorize_layer(0, &layer, &opts).unwrap();
        assert!(r.groups[0].r_sdd < 1e-12);
    }

    #[test]
    fn unbalanced_keeps_unit_lambdas_and_float_start() {
        let opts = FactorizeOptions { recovery: None, balance: false, ..FactorizeOptions::default() };
        let (f, r) = factorize_model(&model(2), &opts).unwrap();
        assert!(r.iter().flat_map(|l| &l.groups).all(|g| g.r_recovered.is_none()));
        let g = &f.layers[1].factors.as_ref().unwrap()[0];
        assert_eq!((g.lambda_x, g.lambda_y), (1.0, 1.0));
        assert_eq!(g.accumulators.as_ref().unwrap().0, g.x.to_dense());
    }

    #[test]
    fn deterministic_and_order_independent() {
        let m = model(3);
        let opts = FactorizeOptions::default();
        let a = factorize_model(&m, &opts).unwrap();
        let mut rev: Vec<_> = (0..2).rev().map(|i| factorize_layer(i, &m.layers[i], &opts).unwrap()).collect();
        rev.reverse();
        assert_eq!(a, assemble(&m, rev));
        assert_ne!(group_seed(0, 0, 1), group_seed(0, 1, 0));
    }

    #[test]
    fn errors_name_the_layer() {
        let m = model(1);
        let opts = FactorizeOptions { k_policy: KPolicy::Rule(KRule::Fixed(0)), ..FactorizeOptions::default() };
        let err = factorize_model(&m, &opts).unwrap_err().to_string();
        assert!(err.contains("c1"), "{err}");
    }
}
