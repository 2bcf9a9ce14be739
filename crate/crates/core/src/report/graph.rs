//! DOT exports of the multitask model graph and of knowledge flow between tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::error::Result;
use crate::store::{LayerId, SystemState};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
    "#bcbd22", "#7f7f7f",
];

fn badge(n: usize) -> String {
    match n {
        0 => "\u{24EA}".to_string(),
        1..=20 => char::from_u32(0x2460 + n as u32 - 1)
            .expect("circled digit")
            .to_string(),
        _ => format!("({n})"),
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Model graph: one node per layer used by a best model, one coloured path per task.
pub fn model_graph_dot(system: &SystemState) -> Result<String> {
    let mut nodes: BTreeSet<LayerId> = BTreeSet::new();
    for m in system.best.values() {
        nodes.extend(m.layers.iter().copied());
    }
    let heads: BTreeMap<LayerId, f64> = system
        .best
        .values()
        .map(|m| (m.head(), m.quality))
        .collect();

    let mut out = String::new();
    out.push_str("digraph munet {\n  rankdir=BT;\n  node [shape=box, style=rounded, fontname=\"Helvetica\"];\n");
    for (i, task) in system.best.keys().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        writeln!(
            out,
            "  {} [label={}, shape=oval, color=\"{color}\"];",
            quote(&format!("input:{task}")),
            quote(task)
        )
        .expect("write to string");
    }
    for &id in &nodes {
        let l = system.store.get(id)?;
        let mut label = format!(
            "{} {id} {}",
            l.config().kind.name(),
            badge(system.unique_task_count(id)?)
        );
        if let Some(q) = heads.get(&id) {
            write!(label, "\\nacc {q:.4}").expect("write to string");
        }
        writeln!(out, "  {} [label=\"{label}\"];", quote(&id.to_string()))
            .expect("write to string");
    }
    for (i, (task, m)) in system.best.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut prev = format!("input:{task}");
        for id in &m.layers {
            let cur = id.to_string();
            writeln!(
                out,
                "  {} -> {} [color=\"{color}\"];",
                quote(&prev),
                quote(&cur)
            )
            .expect("write to string");
            prev = cur;
        }
    }
    out.push_str("}\n");
    Ok(out)
}

/// Task-to-task knowledge flow; edge `a -> b` carries the fraction of `b`'s
/// parameter-weighted training cycles that were spent on `a`.
pub fn flow_graph_dot(system: &SystemState) -> Result<String> {
    let mut out = String::new();
    out.push_str("digraph flow {\n  node [shape=oval, fontname=\"Helvetica\"];\n");
    for (i, task) in system.best.keys().enumerate() {
        writeln!(
            out,
            "  {} [color=\"{}\"];",
            quote(task),
            PALETTE[i % PALETTE.len()]
        )
        .expect("write to string");
    }
    for (task, m) in &system.best {
        for (source, frac) in system.knowledge_flow(m)? {
            writeln!(
                out,
                "  {} -> {} [label=\"{frac:.3}\", penwidth={:.2}];",
                quote(&source),
                quote(task),
                0.5 + 4.0 * frac
            )
            .expect("write to string");
        }
    }
    out.push_str("}\n");
    Ok(out)
}
