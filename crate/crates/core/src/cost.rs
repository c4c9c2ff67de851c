//! Operation and storage accounting for original, binary and factorized layers.
//!
//! For one group with `m = w h c / g` rows, `n' = n / g` columns and `P = W' H'`
//! output positions:
//!
//! ```text
//! original  mul = add = P m n'            bytes = 4 m n'
//! binary    mul = P n', add = P m n'      bytes = m n' / 8 + 4 n'
//! ffn       mul = P k                     add = (1 - alpha) P (m + n') k
//! ```
//!
//! FFN storage is reported twice: the packed two-bit layout used on disk and
//! the entropy of a ternary source with zero probability `alpha`, plus four
//! bytes per scale entry in both cases.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{FfnError, Result};
use crate::layers::{GroupFactors, Model};
use crate::tensor::{LayerDescriptor, TernaryMatrix};

/// Sparsity assumed when no factors are available.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KRule {
    Min,
    Param,
    Fixed(usize),
}

impl KRule {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(KRule::Min),
            "param" => Ok(KRule::Param),
            _ => {
                let n = s.strip_prefix("fixed:").unwrap_or(s);
                match n.parse::<usize>() {
                    Ok(k) if k > 0 => Ok(KRule::Fixed(k)),
                    _ => Err(FfnError::config(format!("unknown k rule '{s}'"))),
                }
            }
        }
    }

    pub fn apply(self, rows: usize, cols: usize) -> usize {
        match self {
            KRule::Min => rows.min(cols),
            KRule::Param => {
                let (m, n) = (rows as f64, cols as f64);
                ((m * n / (m + n)).round() as usize).max(1)
            }
            KRule::Fixed(k) => k,
        }
    }
}

/// Per-layer k rules keyed by layer name, with an optional `*` fallback.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KTable {
    pub entries: Vec<(String, KRule)>,
    pub fallback: Option<KRule>,
}

impl KTable {
    /// One `name rule` pair per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = KTable::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(rule), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(FfnError::config(format!("k table line {}: expected 'name k'", i + 1)));
            };
            let rule = KRule::parse(rule).map_err(|e| FfnError::config(format!("k table line {}: {e}", i + 1)))?;
            if name == "*" {
                table.fallback = Some(rule);
            } else {
                table.entries.push((name.to_string(), rule));
            }
        }
        Ok(table)
    }

    pub fn rule_for(&self, name: &str) -> Option<KRule> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| *r)
            .or(self.fallback)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KPolicy {
    Rule(KRule),
    Table(KTable),
}

impl KPolicy {
    /// Parses `min`, `param`, `fixed:N` or `table:FILE`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("table:") {
            let text = fs::read_to_string(path)
                .map_err(|e| FfnError::config(format!("cannot read k table {path}: {e}")))?;
            return Ok(KPolicy::Table(KTable::parse(&text)?));
        }
        if s.starts_with("fixed:") || s == "min" || s == "param" {
            return KRule::parse(s).map(KPolicy::Rule);
        }
        Err(FfnError::config(format!("unknown k policy '{s}' (min, param, fixed:N, table:FILE)")))
    }
}

/// Decomposition width for one group of `desc`.
pub fn choose_k(desc: &LayerDescriptor, policy: &KPolicy) -> Result<usize> {
    desc.validate()?;
    let rule = match policy {
        KPolicy::Rule(r) => *r,
        KPolicy::Table(t) => t.rule_for(&desc.label()).ok_or_else(|| {
            FfnError::config(format!("k table has no entry for layer {} and no '*' rule", desc.label()))
        })?,
    };
    Ok(rule.apply(desc.group_rows(), desc.group_cols()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub mul: u64,
    pub add: u64,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FfnCounts {
    pub mul: u64,
    pub add: f64,
    pub bytes_packed: u64,
    pub bytes_entropy: f64,
}

pub fn count_original(desc: &LayerDescriptor) -> Counts {
    let macs = (desc.out_positions() * desc.params()) as u64;
    Counts { mul: macs, add: macs, bytes: 4 * desc.params() as u64 }
}

/// Binary weights with one floating-point scale per filter.
pub fn count_binary(desc: &LayerDescriptor) -> Counts {
    let pos = desc.out_positions() as u64;
    Counts {
        mul: pos * desc.out_channels as u64,
        add: pos * desc.params() as u64,
        bytes: (desc.params() as u64).div_ceil(8) + 4 * desc.out_channels as u64,
    }
}

/// Entropy in bits of a ternary symbol that is zero with probability `alpha`
/// and +1 or -1 with equal probability otherwise.
pub fn ternary_entropy_bits(alpha: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
    h(alpha) + 2.0 * h((1.0 - alpha) / 2.0)
}

pub fn count_ffn(desc: &LayerDescriptor, k: usize, alpha: f64) -> Result<FfnCounts> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FfnError::domain(format!("sparsity {alpha} outside [0, 1]")));
    }
    let g = desc.groups as u64;
    let (m, n) = (desc.group_rows() as u64, desc.group_cols() as u64);
    let k64 = k as u64;
    let pos = desc.out_positions() as u64;
    let weights = ((m + n) * k64 * g) as f64;
    Ok(FfnCounts {
        mul: pos * k64 * g,
        add: (1.0 - alpha) * (pos * (m + n) * k64 * g) as f64,
        bytes_packed: g * (m + n) * k64.div_ceil(4) + 4 * k64 * g,
        bytes_entropy: weights * ternary_entropy_bits(alpha) / 8.0 + (4 * k64 * g) as f64,
    })
}

/// Fraction of zero entries across `X` and `Y` combined.
pub fn measure_sparsity(x: &TernaryMatrix, y: &TernaryMatrix) -> Result<f64> {
    let total = x.rows() * x.cols() + y.rows() * y.cols();
    if total == 0 {
        return Err(FfnError::size("cannot measure sparsity of empty factors"));
    }
    Ok((x.zero_count() + y.zero_count()) as f64 / total as f64)
}

fn group_sparsity(groups: &[GroupFactors]) -> Result<f64> {
    let zeros: usize = groups.iter().map(|g| g.x.zero_count() + g.y.zero_count()).sum();
    let total: usize = groups
        .iter()
        .map(|g| g.x.rows() * g.x.cols() + g.y.rows() * g.y.cols())
        .sum();
    if total == 0 {
        return Err(FfnError::size("cannot measure sparsity of empty factors"));
    }
    Ok(zeros as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub k: usize,
    pub alpha: f64,
    pub original: Counts,
    pub binary: Counts,
    pub ffn: FfnCounts,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub original: Counts,
    pub binary: Counts,
    pub ffn: FfnCounts,
}

impl CostReport {
    pub fn from_layers(layers: Vec<LayerCost>) -> Self {
        let mut r = CostReport { layers, ..Default::default() };
        for l in &r.layers {
            for (tot, c) in [(&mut r.original, &l.original), (&mut r.binary, &l.binary)] {
                tot.mul += c.mul;
                tot.add += c.add;
                tot.bytes += c.bytes;
            }
            r.ffn.mul += l.ffn.mul;
            r.ffn.add += l.ffn.add;
            r.ffn.bytes_packed += l.ffn.bytes_packed;
            r.ffn.bytes_entropy += l.ffn.bytes_entropy;
        }
        r
    }

    /// Overall sparsity, weighted by factor size.
    pub fn alpha(&self) -> f64 {
        let (mut w, mut z) = (0.0, 0.0);
        for l in &self.layers {
            let size = l.ffn.bytes_packed as f64;
            w += size;
            z += size * l.alpha;
        }
        if w > 0.0 { z / w } else { 0.0 }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| FfnError::data(format!("csv: {e}"));
        w.write_record([
            "layer", "k", "alpha", "orig_mul", "orig_add", "orig_bytes", "bin_mul", "bin_add", "bin_bytes",
            "ffn_mul", "ffn_add", "ffn_bytes_packed", "ffn_bytes_entropy",
        ])
        .map_err(csv_err)?;
        let total = LayerCost {
            name: "total".into(),
            k: 0,
            alpha: self.alpha(),
            original: self.original,
            binary: self.binary,
            ffn: self.ffn,
        };
        for l in self.layers.iter().chain(std::iter::once(&total)) {
            w.write_record([
                l.name.clone(),
                l.k.to_string(),
                format!("{:.6}", l.alpha),
                l.original.mul.to_string(),
                l.original.add.to_string(),
                l.original.bytes.to_string(),
                l.binary.mul.to_string(),
                l.binary.add.to_string(),
                l.binary.bytes.to_string(),
                l.ffn.mul.to_string(),
                format!("{:.1}", l.ffn.add),
                l.ffn.bytes_packed.to_string(),
                format!("{:.1}", l.ffn.bytes_entropy),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| FfnError::data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| FfnError::data(e.to_string()))
    }

    /// Per-layer listing followed by the Original / Binary / FFN summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "layer", "k", "alpha", "orig mul", "orig bytes", "ffn mul", "ffn add", "ffn bytes"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<18} {:>6} {:>6.3} {:>12} {:>12} {:>12} {:>12} {:>12}",
                l.name,
                l.k,
                l.alpha,
                mega(l.original.mul as f64),
                mega(l.original.bytes as f64),
                mega(l.ffn.mul as f64),
                mega(l.ffn.add),
                mega(l.ffn.bytes_entropy),
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<22} {:>12} {:>12} {:>12}", "", "Original", "Binary", "FFN");
        let rows = [
            ("Mul", self.original.mul as f64, self.binary.mul as f64, self.ffn.mul as f64),
            ("Add", self.original.add as f64, self.binary.add as f64, self.ffn.add),
            ("Bytes", self.original.bytes as f64, self.binary.bytes as f64, self.ffn.bytes_entropy),
        ];
        for (name, a, b, c) in rows {
            let _ = writeln!(out, "{:<22} {:>12} {:>12} {:>12}", name, mega(a), mega(b), mega(c));
        }
        let _ = writeln!(out, "{:<22} {:>12} {:>12} {:>12}", "Bytes (2-bit packed)", "", "", mega(self.ffn.bytes_packed as f64));
        let _ = writeln!(out, "{:<22} {:>12} {:>12} {:>12.3}", "alpha", "", "", self.alpha());
        out
    }
}

fn mega(v: f64) -> String {
    format!("{:.2}M", v / 1e6)
}

/// Report over bare descriptors at a fixed sparsity.
pub fn report_for_descriptors(descs: &[LayerDescriptor], policy: &KPolicy, alpha: f64) -> Result<CostReport> {
    let layers = descs
        .iter()
        .map(|d| layer_cost(d, choose_k(d, policy)?, alpha))
        .collect::<Result<_>>()?;
    Ok(CostReport::from_layers(layers))
}

/// Report over a model. Factorized layers use their own `k` and measured
/// sparsity unless `alpha_override` is given.
pub fn report_for_model(model: &Model, policy: &KPolicy, alpha_override: Option<f64>) -> Result<CostReport> {
    let layers = model
        .layers
        .iter()
        .map(|l| match &l.factors {
            Some(groups) => {
                let k = groups.first().map_or(0, GroupFactors::k);
                let alpha = match alpha_override {
                    Some(a) => a,
                    None => group_sparsity(groups)?,
                };
                layer_cost(&l.descriptor, k, alpha)
            }
            None => layer_cost(
                &l.descriptor,
                choose_k(&l.descriptor, policy)?,
                alpha_override.unwrap_or(DEFAULT_ALPHA),
            ),
        })
        .collect::<Result<_>>()?;
    Ok(CostReport::from_layers(layers))
}

fn layer_cost(desc: &LayerDescriptor, k: usize, alpha: f64) -> Result<LayerCost> {
    Ok(LayerCost {
        name: desc.label(),
        k,
        alpha,
        original: count_original(desc),
        binary: count_binary(desc),
        ffn: count_ffn(desc, k, alpha)?,
    })
}

/// Reads the descriptors of a manifest without touching tensor files.
pub fn read_descriptors(path: &Path) -> Result<Vec<LayerDescriptor>> {
    Ok(crate::layers::ModelManifest::read(path)?.descriptors())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k_policies() {
        let conv2 = LayerDescriptor::conv(5, 5, 48, 128, 27, 27, 1);
        assert_eq!(choose_k(&conv2, &KPolicy::parse("min").unwrap()).unwrap(), 128);
        let c = LayerDescriptor::conv(3, 3, 64, 64, 32, 32, 1);
        assert_eq!(choose_k(&c, &KPolicy::parse("param").unwrap()).unwrap(), 58);
        assert_eq!(choose_k(&c, &KPolicy::parse("fixed:256").unwrap()).unwrap(), 256);
        assert!(matches!(KPolicy::parse("max"), Err(FfnError::Config(_))));
        assert!(matches!(KPolicy::parse("fixed:0"), Err(FfnError::Config(_))));
        // grouped layers choose k per group
        let grouped = LayerDescriptor::conv(5, 5, 96, 256, 27, 27, 2);
        assert_eq!(choose_k(&grouped, &KPolicy::Rule(KRule::Min)).unwrap(), 128);
    }

    #[test]
    fn k_tables() {
        let t = KTable::parse("# fc sizes\nfc6 2048\nfc7 fixed:3072\n\n* min\n").unwrap();
        let policy = KPolicy::Table(t);
        assert_eq!(choose_k(&LayerDescriptor::fc(9216, 4096).named("fc6"), &policy).unwrap(), 2048);
        assert_eq!(choose_k(&LayerDescriptor::fc(4096, 4096).named("fc7"), &policy).unwrap(), 3072);
        assert_eq!(choose_k(&LayerDescriptor::fc(4096, 10).named("out"), &policy).unwrap(), 10);
        let strict = KPolicy::Table(KTable::parse("fc6 2048").unwrap());
        assert!(matches!(choose_k(&LayerDescriptor::fc(3, 3), &strict), Err(FfnError::Config(_))));
        assert!(KTable::parse("fc6").is_err());
    }

    #[test]
    fn original_counts() {
        let c = LayerDescriptor::conv(3, 3, 64, 64, 32, 32, 1);
        let counts = count_original(&c);
        assert_eq!(counts.mul, 37_748_736);
        assert_eq!(counts.add, counts.mul);
        assert_eq!(counts.bytes, 4 * 36_864);
    }

    #[test]
    fn ffn_counts() {
        let c = LayerDescriptor::conv(3, 3, 64, 64, 32, 32, 1);
        let f = count_ffn(&c, 58, 0.5).unwrap();
        assert_eq!(f.mul, 1024 * 58);
        assert_eq!(f.add, 0.5 * (1024 * (576 + 64) * 58) as f64);
        assert_eq!(f.bytes_packed, (576 + 64) * 15 + 4 * 58);
        assert!((f.bytes_entropy - ((640 * 58) as f64 * 1.5 / 8.0 + 232.0)).abs() < 1e-9);
        assert_eq!(count_ffn(&c, 58, 1.0).unwrap().add, 0.0);
        assert!(count_ffn(&c, 58, 1.5).is_err());
    }

    #[test]
    fn entropy_points() {
        assert!((ternary_entropy_bits(0.5) - 1.5).abs() < 1e-12);
        assert_eq!(ternary_entropy_bits(1.0), 0.0);
        assert!((ternary_entropy_bits(0.0) - 1.0).abs() < 1e-12);
        assert!((ternary_entropy_bits(1.0 / 3.0) - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn sparsity_extremes() {
        let z = TernaryMatrix::zeros(3, 2);
        assert_eq!(measure_sparsity(&z, &z).unwrap(), 1.0);
        let full = TernaryMatrix::from_values(2, 2, &[1, -1, 1, 1]).unwrap();
        assert_eq!(measure_sparsity(&full, &full).unwrap(), 0.0);
        assert!(measure_sparsity(&TernaryMatrix::zeros(0, 0), &TernaryMatrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn empty_model_has_zero_totals() {
        let r = report_for_descriptors(&[], &KPolicy::Rule(KRule::Min), 0.5).unwrap();
        assert_eq!(r.original, Counts::default());
        assert_eq!(r.ffn, FfnCounts::default());
        assert!(r.to_table().contains("Original"));
        assert_eq!(r.to_csv().unwrap().lines().count(), 2);
    }

    #[test]
    fn csv_has_row_per_layer_and_total() {
        let descs = vec![LayerDescriptor::conv(3, 3, 4, 8, 6, 6, 1).named("a"), LayerDescriptor::fc(288, 3).named("b")];
        let r = report_for_descriptors(&descs, &KPolicy::Rule(KRule::Min), 0.5).unwrap();
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("a,8,"));
        assert!(lines[3].starts_with("total,"));
    }

    fn descriptor() -> impl Strategy<Value = LayerDescriptor> {
        (1usize..6, 1usize..6, 1usize..4, 1usize..4, 1usize..9, 1usize..9, 1usize..4).prop_map(
            |(kh, kw, cg, ng, oh, ow, g)| LayerDescriptor::conv(kh, kw, cg * g, ng * g, oh, ow, g),
        )
    }

    proptest! {
        #[test]
        fn counting_invariants(descs in proptest::collection::vec(descriptor(), 0..5), k in 1usize..40, a in 0.0f64..=1.0) {
            for d in &descs {
                let o = count_original(d);
                prop_assert_eq!(o.mul, o.add);
                let f0 = count_ffn(d, k, 0.0).unwrap();
                let fa = count_ffn(d, k, a).unwrap();
                prop_assert_eq!(f0.mul, fa.mul);
                prop_assert!((fa.add - (1.0 - a) * f0.add).abs() <= 1e-9 * f0.add.max(1.0));
            }
            let r = report_for_descriptors(&descs, &KPolicy::Rule(KRule::Fixed(k)), a).unwrap();
            prop_assert_eq!(r.original.mul, descs.iter().map(|d| count_original(d).mul).sum::<u64>());
            prop_assert_eq!(r.ffn.bytes_packed, r.layers.iter().map(|l| l.ffn.bytes_packed).sum::<u64>());
            prop_assert!((0.0..=1.0).contains(&r.alpha()));
        }
    }
}
