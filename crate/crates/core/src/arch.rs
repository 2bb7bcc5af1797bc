//! Receptive-field and parameter-count algebra.
//!
//! Closed forms for a k×k kernel at dilation r:
//!
//! * effective extent `e2 = k + (k−1)(r−1)`, area gain over `e1 = k` of
//!   `(k−1)(r−1)(2k + (k−1)(r−1))`;
//! * a regular kernel covering the same extent needs
//!   `p1 = e2²·D_l·D_{l−1}` weights, the dilated one `p2 = k²·D_l·D_{l−1}`,
//!   so `p1/p2 = (1 + (k−1)(r−1)/k)²`.
//!
//! [`brute_force_receptive_field`] measures extents directly by marking the
//! input pixels that reach one output pixel, without any of the above.

use std::collections::HashSet;
use std::fmt::Write as _;

use num_rational::Ratio;

use crate::blocks::{block_param_count, BlockConfig};
use crate::error::{Error, Result};
use crate::layers::ConvSpec;
use crate::network::{Network, NetworkSpec, StageKind};

/// Parameter count reported for the full 43-class classifier.
pub const REFERENCE_PARAMS: usize = 6_256_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveExtension {
    pub e1: usize,
    pub e2: usize,
    /// `e2² − e1²`.
    pub delta: usize,
}

/// Extent of a single k×k kernel at dilation r.
pub fn receptive_extension(k: usize, r: usize) -> ReceptiveExtension {
    let e2 = k + (k - 1) * (r - 1);
    ReceptiveExtension { e1: k, e2, delta: e2 * e2 - k * k }
}

/// Area gain in factored form, `(k−1)(r−1)(2k + (k−1)(r−1))`.
pub fn extension_area_gain(k: usize, r: usize) -> usize {
    let s = (k - 1) * (r - 1);
    s * (2 * k + s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Regular kernel with the same extent.
    pub p1: u64,
    /// Dilated kernel.
    pub p2: u64,
    pub ratio: Ratio<u64>,
}

pub fn param_comparison(k: usize, r: usize, d_l: usize, d_prev: usize) -> ParamCount {
    let e2 = receptive_extension(k, r).e2 as u64;
    let channels = (d_l * d_prev) as u64;
    let (p1, p2) = (e2 * e2 * channels, (k * k) as u64 * channels);
    ParamCount { p1, p2, ratio: Ratio::new(p1, p2) }
}

/// `(1 + (k−1)(r−1)/k)²` evaluated in exact rational arithmetic.
pub fn ratio_closed_form(k: usize, r: usize) -> Ratio<u64> {
    let base = Ratio::from_integer(1) + Ratio::new(((k - 1) * (r - 1)) as u64, k as u64);
    base * base
}

/// Parameters a block saves by using dilated kernels for its two skip
/// branches instead of regular 5×5 and 7×7 kernels, for `D` channels in and out.
pub fn block_savings(d: usize) -> usize {
    d * d * ((25 - 9) + (49 - 9))
}

/// Side of the smallest square bounding every input pixel that can reach
/// one output pixel through a stride-1 stack, found by explicit marking.
pub fn brute_force_receptive_field(stack: &[ConvSpec]) -> Result<usize> {
    brute_force_receptive_field_on(stack, 129)
}

/// As [`brute_force_receptive_field`] on a `canvas`×`canvas` probe grid.
pub fn brute_force_receptive_field_on(stack: &[ConvSpec], canvas: usize) -> Result<usize> {
    if stack.is_empty() {
        return Err(Error::Config("receptive field of an empty stack".into()));
    }
    if let Some(s) = stack.iter().find(|s| s.stride != 1) {
        return Err(Error::Config(format!("stride-1 stacks only, got stride {}", s.stride)));
    }
    let centre = (canvas / 2) as isize;
    let mut marked: HashSet<(isize, isize)> = HashSet::from([(centre, centre)]);
    // Walk from the output back to the input.
    for spec in stack.iter().rev() {
        let (k, r, pad) = (spec.k as isize, spec.dilation as isize, spec.pad as isize);
        let mut next = HashSet::with_capacity(marked.len() * (k * k) as usize);
        for &(y, x) in &marked {
            for ky in 0..k {
                for kx in 0..k {
                    let (iy, ix) = (y + ky * r - pad, x + kx * r - pad);
                    if iy < 0 || ix < 0 || iy >= canvas as isize || ix >= canvas as isize {
                        return Err(Error::Config(format!("receptive field exceeds the {canvas}×{canvas} probe canvas")));
                    }
                    next.insert((iy, ix));
                }
            }
        }
        marked = next;
    }
    let (ys, xs): (Vec<isize>, Vec<isize>) = marked.into_iter().unzip();
    let span = |v: &[isize]| (v.iter().max().unwrap() - v.iter().min().unwrap() + 1) as usize;
    Ok(span(&ys).max(span(&xs)))
}

/// `1 + Σ (k−1)·r` over a stride-1 stack.
pub fn composed_receptive_field(stack: &[ConvSpec]) -> usize {
    1 + stack.iter().map(|s| (s.k - 1) * s.dilation).sum::<usize>()
}

/// One checked identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of [`audit_identities`].
#[derive(Clone, Debug)]
pub struct IdentityAudit {
    pub checks: Vec<Check>,
    /// (D, savings) for each audited block width.
    pub savings: Vec<(usize, usize)>,
}

impl IdentityAudit {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Checks every closed form above over `ks`×`rs` against exact arithmetic
/// and the brute-force oracle, plus the block savings for `widths`.
pub fn audit_identities(ks: &[usize], rs: &[usize], widths: &[usize]) -> IdentityAudit {
    let mut checks = Vec::new();
    let mut push = |name: String, passed: bool, detail: String| checks.push(Check { name, passed, detail });
    for &k in ks {
        for &r in rs {
            let ext = receptive_extension(k, r);
            let single = ConvSpec::same(1, 1, k, r);
            match brute_force_receptive_field(&[single]) {
                Ok(b) => push(format!("extent k={k} r={r}"), b == ext.e2, format!("brute force {b}, closed form {}", ext.e2)),
                Err(e) => push(format!("extent k={k} r={r}"), false, e.to_string()),
            }
            let stacked = [ConvSpec::same(1, 1, k, 1), single];
            match brute_force_receptive_field(&stacked) {
                Ok(b) => {
                    let want = composed_receptive_field(&stacked);
                    push(format!("stacked extent k={k} r={r}"), b == want, format!("brute force {b}, composed {want}"));
                }
                Err(e) => push(format!("stacked extent k={k} r={r}"), false, e.to_string()),
            }
            let gain = extension_area_gain(k, r);
            push(
                format!("area gain k={k} r={r}"),
                gain == ext.delta,
                format!("factored {gain}, e2²−e1² {}", ext.delta),
            );
            let pc = param_comparison(k, r, 64, 64);
            let closed = ratio_closed_form(k, r);
            let ordered = if k > 1 && r > 1 { pc.p1 > pc.p2 } else { pc.p1 == pc.p2 };
            push(
                format!("param ratio k={k} r={r}"),
                pc.ratio == closed && ordered,
                format!("p1={} p2={} ratio={} closed form={}", pc.p1, pc.p2, pc.ratio, closed),
            );
        }
    }
    let mut savings = Vec::new();
    for &d in widths {
        let from_block = block_param_count(&BlockConfig::new(d, d)).savings_vs_regular;
        let direct = block_savings(d);
        push(format!("block savings D={d}"), from_block == direct, format!("block algebra {from_block}, direct {direct}"));
        savings.push((d, direct));
    }
    IdentityAudit { checks, savings }
}

/// Per-stage line of a parameter audit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub name: String,
    pub row: &'static str,
    /// (c, h, w) after the stage.
    pub output: (usize, usize, usize),
    pub closed_form: usize,
    pub registry: usize,
}

/// Where parameters come from, split by convention-dependent component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub conv_weights: usize,
    pub conv_bias: usize,
    pub batch_norm: usize,
    pub projections: usize,
    pub dense_weights: usize,
    pub dense_bias: usize,
}

#[derive(Clone, Debug)]
pub struct ParamAudit {
    pub closed_form_total: usize,
    pub registry_total: usize,
    pub rows: Vec<AuditRow>,
    pub breakdown: Breakdown,
    /// Running statistics stored in checkpoints but not learned.
    pub buffer_total: usize,
}

impl ParamAudit {
    /// Signed relative deviation from [`REFERENCE_PARAMS`].
    pub fn deviation(&self) -> f64 {
        (self.closed_form_total as f64 - REFERENCE_PARAMS as f64) / REFERENCE_PARAMS as f64
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<10} {:>14} {:>12} {:>12}", "stage", "row", "output", "closed", "registry");
        for r in &self.rows {
            let (c, h, w) = r.output;
            let shape = if h == 1 && w == 1 && r.name.starts_with("dense") { format!("{c}") } else { format!("{h}x{w}x{c}") };
            let _ = writeln!(s, "{:<10} {:<10} {:>14} {:>12} {:>12}", r.name, r.row, shape, r.closed_form, r.registry);
        }
        let b = &self.breakdown;
        let _ = writeln!(s);
        let _ = writeln!(s, "conv weights (5 per block + conv1) {:>12}", b.conv_weights);
        let _ = writeln!(s, "conv1 bias                         {:>12}", b.conv_bias);
        let _ = writeln!(s, "batch norm scale + shift           {:>12}", b.batch_norm);
        let _ = writeln!(s, "1x1 shortcut projections           {:>12}", b.projections);
        let _ = writeln!(s, "dense weights                      {:>12}", b.dense_weights);
        let _ = writeln!(s, "dense bias                         {:>12}", b.dense_bias);
        let _ = writeln!(s, "batch norm running stats (buffers) {:>12}", self.buffer_total);
        let _ = writeln!(s);
        let _ = writeln!(s, "closed-form total {}", self.closed_form_total);
        let _ = writeln!(s, "registry total    {}", self.registry_total);
        let _ = writeln!(s, "reference total   {} (deviation {:+.2}%)", REFERENCE_PARAMS, 100.0 * self.deviation());
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("name,row,output_c,output_h,output_w,params\n");
        for r in &self.rows {
            let (c, h, w) = r.output;
            let _ = writeln!(s, "{},\"{}\",{c},{h},{w},{}", r.name, r.row, r.closed_form);
        }
        s
    }
}

fn stage_breakdown(kind: &StageKind) -> Breakdown {
    match kind {
        StageKind::Conv { spec, bias } => Breakdown {
            conv_weights: spec.weight_count(),
            conv_bias: if *bias { spec.c_out } else { 0 },
            ..Breakdown::default()
        },
        StageKind::Block(cfg) => {
            let c = block_param_count(cfg);
            Breakdown { conv_weights: c.conv_weights, batch_norm: c.batch_norm, projections: c.projection, ..Breakdown::default() }
        }
        StageKind::MaxPool { .. } | StageKind::AvgPool { .. } => Breakdown::default(),
        StageKind::Dense { inputs, outputs, .. } | StageKind::Classifier { inputs, outputs } => {
            Breakdown { dense_weights: inputs * outputs, dense_bias: *outputs, ..Breakdown::default() }
        }
    }
}

impl Breakdown {
    fn total(&self) -> usize {
        self.conv_weights + self.conv_bias + self.batch_norm + self.projections + self.dense_weights + self.dense_bias
    }

    fn add(&mut self, o: &Breakdown) {
        self.conv_weights += o.conv_weights;
        self.conv_bias += o.conv_bias;
        self.batch_norm += o.batch_norm;
        self.projections += o.projections;
        self.dense_weights += o.dense_weights;
        self.dense_bias += o.dense_bias;
    }
}

/// Counts parameters from the layer algebra and from an instantiated
/// network; any disagreement is an internal consistency error.
pub fn network_param_audit(spec: &NetworkSpec) -> Result<ParamAudit> {
    let shapes = spec.stage_shapes()?;
    let net = Network::<f32>::new(spec.clone(), 0)?;
    let registry = net.param_counts();
    let mut rows = Vec::with_capacity(spec.stages.len());
    let mut breakdown = Breakdown::default();
    for ((st, &output), (name, reg)) in spec.stages.iter().zip(&shapes).zip(registry) {
        debug_assert_eq!(st.name, name);
        let b = stage_breakdown(&st.kind);
        breakdown.add(&b);
        rows.push(AuditRow { name, row: st.row, output, closed_form: b.total(), registry: reg });
    }
    let closed_form_total = rows.iter().map(|r| r.closed_form).sum();
    let registry_total = net.param_count();
    if let Some(r) = rows.iter().find(|r| r.closed_form != r.registry) {
        return Err(Error::Consistency(format!(
            "stage {}: closed form {} != registry {}",
            r.name, r.closed_form, r.registry
        )));
    }
    if closed_form_total != registry_total {
        return Err(Error::Consistency(format!("closed form {closed_form_total} != registry {registry_total}")));
    }
    let buffer_total = net.buffers().iter().map(|(_, b)| b.len()).sum();
    Ok(ParamAudit { closed_form_total, registry_total, rows, breakdown, buffer_total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extension_examples() {
        assert_eq!(receptive_extension(3, 1), ReceptiveExtension { e1: 3, e2: 3, delta: 0 });
        assert_eq!(receptive_extension(3, 2), ReceptiveExtension { e1: 3, e2: 5, delta: 16 });
        assert_eq!(receptive_extension(3, 3), ReceptiveExtension { e1: 3, e2: 7, delta: 40 });
        assert_eq!(extension_area_gain(3, 2), 2 * 1 * (6 + 2));
        assert_eq!(extension_area_gain(3, 3), 2 * 2 * (6 + 4));
    }

    #[test]
    fn comparison_examples() {
        let pc = param_comparison(3, 2, 64, 64);
        assert_eq!((pc.p1, pc.p2), (102_400, 36_864));
        assert_eq!(pc.ratio, Ratio::new(25, 9));
        let pc = param_comparison(3, 1, 17, 5);
        assert_eq!(pc.p1, pc.p2);
        assert_eq!(pc.ratio, Ratio::from_integer(1));
        let pc = param_comparison(3, 3, 1, 1);
        assert_eq!((pc.p1, pc.p2), (49, 9));
    }

    #[test]
    fn ratio_identity_holds_over_a_wide_grid() {
        for k in 1..=9 {
            for r in 1..=6 {
                assert_eq!(param_comparison(k, r, 3, 7).ratio, ratio_closed_form(k, r), "k={k} r={r}");
                assert_eq!(extension_area_gain(k, r), receptive_extension(k, r).delta);
            }
        }
    }

    #[test]
    fn dilation_beats_regular_even_when_premise_fails() {
        // (k−1)(r−1) = 2 < k = 3, yet p1 > p2 still.
        assert!((3 - 1) * (2 - 1) < 3);
        let pc = param_comparison(3, 2, 1, 1);
        assert!(pc.p1 > pc.p2);
    }

    #[test]
    fn brute_force_examples() {
        let s = |k, r| ConvSpec::same(1, 1, k, r);
        assert_eq!(brute_force_receptive_field(&[s(3, 2)]).unwrap(), 5);
        assert_eq!(brute_force_receptive_field(&[s(3, 1), s(3, 1)]).unwrap(), 5);
        assert_eq!(brute_force_receptive_field(&[s(3, 1), s(3, 2)]).unwrap(), 7);
        assert_eq!(brute_force_receptive_field(&[s(3, 1), s(3, 2), s(3, 3)]).unwrap(), 13);
    }

    #[test]
    fn brute_force_rejects_bad_stacks() {
        assert!(brute_force_receptive_field(&[]).is_err());
        assert!(brute_force_receptive_field(&[ConvSpec::new(1, 1, 3).with_stride(2)]).is_err());
        let wide = vec![ConvSpec::same(1, 1, 3, 3); 4];
        assert!(brute_force_receptive_field_on(&wide, 15).is_err());
    }

    #[test]
    fn identity_audit_passes() {
        let audit = audit_identities(&[1, 3, 5], &[1, 2, 3], &[64, 128, 256]);
        assert!(audit.passed(), "{:?}", audit.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
        assert_eq!(audit.savings[0], (64, 229_376));
    }

    #[test]
    fn small_network_audit_is_consistent() {
        let spec = NetworkSpec::with_widths(5, [4, 8, 16], 14, 8).unwrap();
        let audit = network_param_audit(&spec).unwrap();
        assert_eq!(audit.closed_form_total, audit.registry_total);
        assert_eq!(audit.rows.len(), spec.stages.len());
        assert!(audit.csv().lines().count() == spec.stages.len() + 1);
    }
}
