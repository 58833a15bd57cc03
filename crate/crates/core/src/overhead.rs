//! Closed-form per-token FLOP accounting for one transformer layer's linear
//! projections versus the score predictor, with exact integer arithmetic.
//!
//! Per layer and token: C = 4·D_h·(H_Q·D + H·D) + 6·D_h·D_int. The MLP
//! predictor costs (D_h/4)·(D_h + H), the linear one 2·D_h·H. Attention's
//! quadratic matmul is deliberately excluded, making the reported relative
//! overhead a conservative upper bound.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub query_heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub hidden_dim: u64,
    pub ffn_dim: u64,
}

impl ArchSpec {
    pub fn new(
        name: &str,
        query_heads: u64,
        kv_heads: u64,
        head_dim: u64,
        hidden_dim: u64,
        ffn_dim: u64,
    ) -> Self {
        Self {
            name: name.to_string(),
            query_heads,
            kv_heads,
            head_dim,
            hidden_dim,
            ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_heads == 0
            || self.head_dim == 0
            || self.hidden_dim == 0
            || self.ffn_dim == 0
        {
            return Err(Error::Validation(format!(
                "arch spec '{}' has a zero dimension",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateFlavor {
    Mlp,
    Linear,
}

/// FLOPs of the attention + FFN linear projections, per token and layer.
pub fn projection_flops(spec: &ArchSpec) -> Result<u128> {
    spec.validate()?;
    let dh = spec.hidden_dim as u128;
    let attn = 4 * dh * (spec.query_heads as u128 + spec.kv_heads as u128) * spec.head_dim as u128;
    let ffn = 6 * dh * spec.ffn_dim as u128;
    Ok(attn + ffn)
}

fn attn_flops(spec: &ArchSpec) -> u128 {
    4 * spec.hidden_dim as u128
        * (spec.query_heads as u128 + spec.kv_heads as u128)
        * spec.head_dim as u128
}

/// Predictor FLOPs, per token and layer. The MLP cost (D_h/4)·(D_h+H) is
/// exact when D_h is a multiple of 4 and rounded down otherwise (the report
/// flags that case).
pub fn surrogate_flops(spec: &ArchSpec, flavor: SurrogateFlavor) -> Result<u128> {
    spec.validate()?;
    let dh = spec.hidden_dim as u128;
    let h = spec.kv_heads as u128;
    Ok(match flavor {
        SurrogateFlavor::Mlp => dh * (dh + h) / 4,
        SurrogateFlavor::Linear => 2 * dh * h,
    })
}

/// Predictor parameter count (weights only, matching the FLOP formulas'
/// factor-2 MAC convention).
pub fn surrogate_params(spec: &ArchSpec, flavor: SurrogateFlavor) -> u128 {
    let dh = spec.hidden_dim as u128;
    let h = spec.kv_heads as u128;
    match flavor {
        SurrogateFlavor::Mlp => dh * (dh + h) / 8,
        SurrogateFlavor::Linear => dh * h,
    }
}

/// Layer projection parameter count (C/2 under the same convention).
pub fn projection_params(spec: &ArchSpec) -> u128 {
    2 * spec.hidden_dim as u128
        * (spec.query_heads as u128 + spec.kv_heads as u128)
        * spec.head_dim as u128
        + 3 * spec.hidden_dim as u128 * spec.ffn_dim as u128
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadReport {
    pub spec: ArchSpec,
    pub c_attn: u128,
    pub c_ffn: u128,
    pub c: u128,
    pub c_mlp: u128,
    pub c_linear: u128,
    /// C_mlp / C, full precision.
    pub ratio_mlp: f64,
    pub ratio_linear: f64,
    /// True when D_h is not a multiple of 8 and the MLP width D_h/8 (and its
    /// cost) is therefore not integral.
    pub fractional_mlp_width: bool,
}

pub fn overhead_report(spec: &ArchSpec) -> Result<OverheadReport> {
    let c = projection_flops(spec)?;
    let c_attn = attn_flops(spec);
    let c_mlp = surrogate_flops(spec, SurrogateFlavor::Mlp)?;
    let c_linear = surrogate_flops(spec, SurrogateFlavor::Linear)?;
    // exact rational D_h·(D_h+H)/4 for the ratio, immune to the integer
    // truncation above
    let mlp_num = spec.hidden_dim as f64 * (spec.hidden_dim + spec.kv_heads) as f64;
    Ok(OverheadReport {
        spec: spec.clone(),
        c_attn,
        c_ffn: c - c_attn,
        c,
        c_mlp,
        c_linear,
        ratio_mlp: mlp_num / 4.0 / c as f64,
        ratio_linear: c_linear as f64 / c as f64,
        fractional_mlp_width: spec.hidden_dim % 8 != 0,
    })
}

/// Percentage rounded to two decimals, as shown in the table view.
pub fn percent_2dp(ratio: f64) -> f64 {
    (ratio * 10_000.0).round() / 100.0
}

/// Reference model shapes with externally reported overhead percentages,
/// plus this repo's toy configuration.
pub fn registry() -> Vec<ArchSpec> {
    vec![
        ArchSpec::new("Qwen3-8B", 32, 8, 128, 4096, 12288),
        ArchSpec::new("Llama-3.1-8B", 32, 8, 128, 4096, 14336),
        ArchSpec::new("Qwen3-32B", 64, 8, 128, 5120, 25600),
        ArchSpec::new("toy", 4, 2, 16, 64, 128),
    ]
}

/// Expected 2-decimal percentages for the three reference rows.
pub const REFERENCE_PERCENTAGES: [(&str, f64, f64); 3] = [
    ("Qwen3-8B", 1.09, 0.02),
    ("Llama-3.1-8B", 0.96, 0.02),
    ("Qwen3-32B", 0.67, 0.01),
];

/// Verify the registry reproduces the reference percentages exactly at
/// 2-decimal rounding.
pub fn self_test() -> Result<()> {
    let specs = registry();
    for &(name, want_mlp, want_linear) in &REFERENCE_PERCENTAGES {
        let spec = specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Validation(format!("registry row '{name}' missing")))?;
        let report = overhead_report(spec)?;
        let got_mlp = percent_2dp(report.ratio_mlp);
        let got_linear = percent_2dp(report.ratio_linear);
        if got_mlp != want_mlp || got_linear != want_linear {
            return Err(Error::Validation(format!(
                "overhead self-test: {name} -> {got_mlp}%/{got_linear}%, expected {want_mlp}%/{want_linear}%"
            )));
        }
    }
    Ok(())
}

pub fn format_table(reports: &[OverheadReport]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<14} {:>6} {:>4} {:>6} {:>6} {:>7} {:>15} {:>12} {:>10} {:>9} {:>9}",
        "model", "H_Q", "H", "D", "D_h", "D_int", "C", "C_mlp", "C_linear", "mlp%", "linear%"
    )
    .expect("string write");
    for r in reports {
        writeln!(
            out,
            "{:<14} {:>6} {:>4} {:>6} {:>6} {:>7} {:>15} {:>12} {:>10} {:>8.2}% {:>8.2}%",
            r.spec.name,
            r.spec.query_heads,
            r.spec.kv_heads,
            r.spec.head_dim,
            r.spec.hidden_dim,
            r.spec.ffn_dim,
            r.c,
            r.c_mlp,
            r.c_linear,
            r.ratio_mlp * 100.0,
            r.ratio_linear * 100.0
        )
        .expect("string write");
    }
    out
}

pub fn to_csv(reports: &[OverheadReport]) -> String {
    let mut out = String::from(
        "model,query_heads,kv_heads,head_dim,hidden_dim,ffn_dim,c,c_mlp,c_linear,ratio_mlp,ratio_linear\n",
    );
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.spec.name,
            r.spec.query_heads,
            r.spec.kv_heads,
            r.spec.head_dim,
            r.spec.hidden_dim,
            r.spec.ffn_dim,
            r.c,
            r.c_mlp,
            r.c_linear,
            r.ratio_mlp,
            r.ratio_linear
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn qwen3_8b() -> ArchSpec {
        ArchSpec::new("Qwen3-8B", 32, 8, 128, 4096, 12288)
    }

    #[test]
    fn qwen3_8b_projection_flops() {
        assert_eq!(projection_flops(&qwen3_8b()).unwrap(), 385_875_968);
    }

    #[test]
    fn doubling_ffn_width_adds_exactly_its_term() {
        let a = qwen3_8b();
        let mut b = a.clone();
        b.ffn_dim *= 2;
        let diff = projection_flops(&b).unwrap() - projection_flops(&a).unwrap();
        assert_eq!(diff, 6 * a.hidden_dim as u128 * a.ffn_dim as u128);
    }

    #[test]
    fn no_gqa_attention_term() {
        let spec = ArchSpec::new("mha", 16, 16, 64, 1024, 1);
        // H_Q = H: attention term collapses to 8·D_h·H·D
        assert_eq!(attn_flops(&spec), 8 * 1024 * 16 * 64);
    }

    #[test]
    fn qwen3_8b_surrogate_flops() {
        let s = qwen3_8b();
        assert_eq!(surrogate_flops(&s, SurrogateFlavor::Mlp).unwrap(), 1024 * 4104);
        assert_eq!(surrogate_flops(&s, SurrogateFlavor::Linear).unwrap(), 65_536);
    }

    #[test]
    fn zero_heads_degenerate_linear_cost() {
        let spec = ArchSpec::new("degenerate", 4, 0, 16, 64, 128);
        assert_eq!(surrogate_flops(&spec, SurrogateFlavor::Linear).unwrap(), 0);
    }

    #[test]
    fn reference_rows_round_to_published_percentages() {
        self_test().unwrap();
        // spot-check the precise ratios behind the rounding
        let r = overhead_report(&qwen3_8b()).unwrap();
        assert_eq!(percent_2dp(r.ratio_mlp), 1.09);
        assert_eq!(percent_2dp(r.ratio_linear), 0.02);
    }

    #[test]
    fn all_reference_reports() {
        let want = [
            ("Llama-3.1-8B", 436_207_616u128, 0.96, 0.02),
            ("Qwen3-32B", 975_175_680, 0.67, 0.01),
        ];
        for (name, c, mlp, lin) in want {
            let spec = registry().into_iter().find(|s| s.name == name).unwrap();
            let r = overhead_report(&spec).unwrap();
            assert_eq!(r.c, c, "{name}");
            assert_eq!(percent_2dp(r.ratio_mlp), mlp, "{name}");
            assert_eq!(percent_2dp(r.ratio_linear), lin, "{name}");
        }
    }

    #[test]
    fn memory_ratio_equals_flops_ratio() {
        // parameter-count ratio and FLOPs ratio agree for both flavors: the
        // factor 2 per multiply-accumulate cancels
        let mut rng = SplitMix64::new(7);
        for _ in 0..100 {
            let spec = ArchSpec::new(
                "random",
                1 + rng.below(64) as u64,
                1 + rng.below(16) as u64,
                8 * (1 + rng.below(32) as u64),
                8 * (1 + rng.below(1024) as u64), // multiple of 8: exact MLP width
                1 + rng.below(40_000) as u64,
            );
            let c = projection_flops(&spec).unwrap();
            let p = projection_params(&spec);
            assert_eq!(c, 2 * p);
            for flavor in [SurrogateFlavor::Mlp, SurrogateFlavor::Linear] {
                let cf = surrogate_flops(&spec, flavor).unwrap();
                let pf = surrogate_params(&spec, flavor);
                assert_eq!(cf, 2 * pf, "{flavor:?}");
                let flops_ratio = cf as f64 / c as f64;
                let mem_ratio = pf as f64 / p as f64;
                assert_eq!(flops_ratio, mem_ratio, "{flavor:?}");
            }
        }
    }

    #[test]
    fn fractional_width_flagged() {
        let spec = ArchSpec::new("odd", 4, 2, 16, 60, 128);
        let r = overhead_report(&spec).unwrap();
        assert!(r.fractional_mlp_width);
        let clean = overhead_report(&qwen3_8b()).unwrap();
        assert!(!clean.fractional_mlp_width);
    }

    #[test]
    fn table_contains_every_registry_row() {
        let reports: Vec<OverheadReport> = registry()
            .iter()
            .map(|s| overhead_report(s).unwrap())
            .collect();
        let table = format_table(&reports);
        for s in registry() {
            assert!(table.contains(&s.name), "missing row {}", s.name);
        }
        assert!(table.contains("1.09%"));
        let csv = to_csv(&reports);
        assert_eq!(csv.lines().count(), 1 + registry().len());
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = ArchSpec::new("bad", 0, 2, 16, 64, 128);
        assert!(projection_flops(&spec).is_err());
    }
}
