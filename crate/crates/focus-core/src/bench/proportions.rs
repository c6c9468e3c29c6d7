//! Unanswerable-proportion tables across models and benchmarks.
//!
//! Rows average per model across its benchmarks and per benchmark across
//! models; both tables order by descending proportion, which puts the most
//! uncertainty-inducing benchmark first.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunTag {
    pub model: String,
    pub benchmark: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionTable {
    /// (model, benchmark, proportion) cells in input order.
    pub cells: Vec<(String, String, f64)>,
    /// Per-model averages, descending by proportion (ties by name).
    pub per_model: Vec<(String, f64)>,
    /// Per-benchmark averages, descending by proportion (ties by name).
    pub per_benchmark: Vec<(String, f64)>,
}

fn averaged(groups: Vec<(String, Vec<f64>)>) -> Vec<(String, f64)> {
    let mut rows: Vec<(String, f64)> = groups
        .into_iter()
        .map(|(name, values)| {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            (name, mean)
        })
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

fn group_by<F: Fn(&RunTag) -> &str>(runs: &[(RunTag, f64)], key: F) -> Vec<(String, Vec<f64>)> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (tag, value) in runs {
        let name = key(tag);
        match groups.iter_mut().find(|(g, _)| g == name) {
            Some((_, values)) => values.push(*value),
            None => groups.push((name.to_string(), vec![*value])),
        }
    }
    groups
}

/// Build the proportion table from `(tag, unanswerable_proportion)` runs.
pub fn report_proportions(runs: &[(RunTag, f64)]) -> ProportionTable {
    ProportionTable {
        cells: runs
            .iter()
            .map(|(tag, p)| (tag.model.clone(), tag.benchmark.clone(), *p))
            .collect(),
        per_model: averaged(group_by(runs, |t| &t.model)),
        per_benchmark: averaged(group_by(runs, |t| &t.benchmark)),
    }
}

fn pct(p: f64) -> String {
    format!("{:.2}%", p * 100.0)
}

impl ProportionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,name,unanswerable_proportion\n");
        for (model, benchmark, p) in &self.cells {
            out.push_str(&format!("run,{model}:{benchmark},{}\n", pct(*p)));
        }
        for (model, p) in &self.per_model {
            out.push_str(&format!("model,{model},{}\n", pct(*p)));
        }
        for (benchmark, p) in &self.per_benchmark {
            out.push_str(&format!("benchmark,{benchmark},{}\n", pct(*p)));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Model | Unanswerable |\n|---|---|\n");
        for (model, p) in &self.per_model {
            out.push_str(&format!("| {model} | {} |\n", pct(*p)));
        }
        out.push_str("\n| Benchmark | Unanswerable |\n|---|---|\n");
        for (benchmark, p) in &self.per_benchmark {
            out.push_str(&format!("| {benchmark} | {} |\n", pct(*p)));
        }
        out
    }
}
