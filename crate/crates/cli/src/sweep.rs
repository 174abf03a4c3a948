//! Observability sweep over the configured nominal trajectories.

use std::io::Write;

use anyhow::Result;
use crl_core::models::{AugmentedInput, AugmentedState, SchemeKind};
use crl_core::observability::{classify_motion, crl_ob_matrix, numeric_rank, RANK_TOL};
use crl_core::simulation::{nominal_state, relative_state, GlobalPose, RunConfig};

/// Looser than the rank tolerance so near-degenerate motion is labeled.
const CASE_TOL: f64 = 1e-6;

pub struct SweepRow {
    pub t: f64,
    pub scheme: SchemeKind,
    pub rank: usize,
    pub full_rank: usize,
    pub sigma_min: f64,
    /// `(neighbor id, case label)`, with `+` appended when several cases hold.
    pub cases: Vec<(usize, String)>,
}

pub fn observability_sweep(cfg: &RunConfig, scheme: SchemeKind, order: usize, every: usize) -> Result<Vec<SweepRow>> {
    let topology = cfg.topology();
    let set = topology.neighbor_set(cfg.host)?;
    let layout = topology.indirect_layout(cfg.host)?;
    let mut rows = Vec::new();
    for k in (0..=cfg.n_steps()).step_by(every.max(1)) {
        let t = k as f64 * cfg.ts;
        let host = nominal_state(&cfg.swarm[cfg.host], t);
        let host_pose = GlobalPose {
            position: host.position,
            heading: host.heading,
        };
        let mut blocks = Vec::new();
        let mut inputs = Vec::new();
        for &j in &set.neighbors {
            let nb = nominal_state(&cfg.swarm[j], t);
            let pose = GlobalPose {
                position: nb.position,
                heading: nb.heading,
            };
            blocks.push(relative_state(&host_pose, &pose));
            inputs.push(nb.input());
        }
        let states = AugmentedState::new(blocks);
        let input = AugmentedInput::new(host.input(), inputs);
        let ob = crl_ob_matrix(&states, &input, scheme, &layout, order)?;
        let info = numeric_rank(&ob, RANK_TOL);
        let cases = set
            .neighbors
            .iter()
            .enumerate()
            .map(|(alpha, &j)| {
                let c = classify_motion(&states.blocks[alpha], &input.pair(alpha), CASE_TOL);
                (j, format!("{}{}", c.case.label(), if c.multiple { "+" } else { "" }))
            })
            .collect();
        rows.push(SweepRow {
            t,
            scheme,
            rank: info.rank,
            full_rank: ob.ncols(),
            sigma_min: info.sigma_min,
            cases,
        });
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = rows.first() {
        let mut header = vec![
            "t".to_string(),
            "scheme".into(),
            "rank".into(),
            "full_rank".into(),
            "sigma_min".into(),
        ];
        header.extend(first.cases.iter().map(|(j, _)| format!("case_{j}")));
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![
            format!("{:.4}", r.t),
            r.scheme.label().to_string(),
            r.rank.to_string(),
            r.full_rank.to_string(),
            format!("{:.6e}", r.sigma_min),
        ];
        rec.extend(r.cases.iter().map(|(_, c)| c.clone()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
