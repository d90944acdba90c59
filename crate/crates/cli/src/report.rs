use std::fmt::Write;

use unfoldse::{FusionMode, ModelConfig, Network};

use crate::Failure;

pub struct AblationRow {
    pub q: usize,
    pub mode: FusionMode,
    pub params: usize,
    /// Mean SI-SNR of the noisy input and of the enhanced output, in dB.
    pub scores: Option<(f64, f64)>,
}

fn millions(n: usize) -> f64 {
    n as f64 / 1e6
}

/// Parameter totals for `cfg`, with the per-step increment measured on a
/// one-step network when `cfg` has no steps.
pub fn inspect(cfg: &ModelConfig) -> Result<String, Failure> {
    let net = Network::new(cfg.clone(), 0)?;
    let b = net.breakdown();
    let per_step = match b.steps.first() {
        Some(&n) => n,
        None => Network::new(ModelConfig { q: 1, ..cfg.clone() }, 0)?.breakdown().steps[0],
    };
    let mut s = String::new();
    let _ = writeln!(s, "q            {}", cfg.q);
    let _ = writeln!(s, "fusion       {}", cfg.fusion);
    let _ = writeln!(s, "total        {} ({:.2}M)", net.num_params(), millions(net.num_params()));
    let _ = writeln!(s, "encoder      {}", b.encoder);
    let _ = writeln!(s, "initializer  {}", b.initializer);
    for (i, n) in b.steps.iter().enumerate() {
        let _ = writeln!(s, "step {i}       {n}");
    }
    let _ = writeln!(s, "fusion head  {}", b.fusion);
    let _ = writeln!(s, "eta          {}", b.eta);
    let _ = writeln!(s, "per step     {} ({:.2}M)", per_step, millions(per_step));
    Ok(s)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<4} {:<6} {:>9} {:>10} {:>9} {:>9}", "Q", "fusion", "params_M", "noisy_dB", "enh_dB", "delta_dB");
    for r in rows {
        let (noisy, enh, delta) = match r.scores {
            Some((n, e)) => (format!("{n:.2}"), format!("{e:.2}"), format!("{:.2}", e - n)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(s, "{:<4} {:<6} {:>9.2} {:>10} {:>9} {:>9}", r.q, r.mode, millions(r.params), noisy, enh, delta);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_marks_untrained_cells() {
        let t = ablation_table(&[
            AblationRow { q: 0, mode: FusionMode::R, params: 2_894_668, scores: None },
            AblationRow { q: 1, mode: FusionMode::R, params: 4_689_586, scores: Some((-2.5, 7.5)) },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("2.89") && lines[1].ends_with('-'));
        assert!(lines[2].ends_with("10.00"));
    }
}
