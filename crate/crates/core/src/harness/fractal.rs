//! Recursive delegation over a library: the root forks one worker per hex
//! partition, and the first few workers fork again, one grandchild per shelf.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::library::{generate_library, LibraryManifest, LibrarySpec};
use super::{install_script, mock_env, path_str, run_quine, shell_quote, Check, HarnessConfig};
use crate::error::{Error, Result};
use crate::guest::{MockResponse, MockRule, MockScript};
use crate::tools::Limits;
use crate::trace::reconstruct_tree;

/// Matches any byte outside the identifier alphabet.
const ANOMALY_PATTERN: &str = "[^0-9a-f-]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FractalPlan {
    pub hex_count: usize,
    pub shelf_count: usize,
    pub fanout: usize,
    /// How many of the first-level workers split their hexes by shelf.
    pub recursing: usize,
}

impl FractalPlan {
    /// Hexes assigned to worker `i` (round-robin).
    pub fn partition(&self, i: usize) -> Vec<usize> {
        (i..self.hex_count).step_by(self.fanout).collect()
    }

    fn validate(&self) -> Result<()> {
        let max = Limits::default().max_fork_children;
        if self.fanout == 0 || self.fanout > self.hex_count {
            return Err(Error::Usage(format!(
                "fanout must be between 1 and the hex count ({})",
                self.hex_count
            )));
        }
        if self.fanout > max {
            return Err(Error::Usage(format!("fanout {} exceeds the fork limit {max}", self.fanout)));
        }
        if self.recursing > self.fanout {
            return Err(Error::Usage("more recursing workers than workers".into()));
        }
        for i in 0..self.recursing {
            let n = self.partition(i).len() * self.shelf_count;
            if n > max {
                return Err(Error::Usage(format!("worker {i} would fork {n} children, above the limit {max}")));
            }
        }
        Ok(())
    }
}

/// Session count and depth (levels, root = 1) the plan must produce.
pub fn predicted_shape(plan: &FractalPlan) -> (usize, usize) {
    let grandchildren: usize = (0..plan.recursing)
        .map(|i| plan.partition(i).len() * plan.shelf_count)
        .sum();
    let depth = if grandchildren > 0 { 3 } else { 2 };
    (1 + plan.fanout + grandchildren, depth)
}

fn root_mission(manifest: &LibraryManifest) -> String {
    format!(
        "Find the one volume under {} whose content is not random identifiers and print its path.",
        path_str(&manifest.root)
    )
}

fn scan_mission(dirs: &[PathBuf]) -> String {
    let dirs: Vec<String> = dirs.iter().map(|d| path_str(d)).collect();
    format!("Scan {} for volumes that are not random identifiers.", dirs.join(" "))
}

fn split_mission(dirs: &[PathBuf]) -> String {
    let dirs: Vec<String> = dirs.iter().map(|d| path_str(d)).collect();
    format!("Split the search of {} by shelf and delegate each shelf.", dirs.join(" "))
}

fn child(mission: &str) -> serde_json::Value {
    json!({ "argv": mission })
}

/// Builds the delegation script for `plan` over `manifest`. Workers append
/// hits to `found`; the root prints the de-duplicated list.
pub fn fractal_script(plan: &FractalPlan, manifest: &LibraryManifest, found: &Path) -> MockScript {
    let found_q = shell_quote(&path_str(found));
    let mut rules = Vec::new();
    let mut first_level = Vec::new();

    let scan_rule = |dirs: &[PathBuf]| {
        let quoted: Vec<String> = dirs.iter().map(|d| shell_quote(&path_str(d))).collect();
        MockRule::exact(
            &scan_mission(dirs),
            vec![
                MockResponse::sh(format!(
                    "grep -rlE '{ANOMALY_PATTERN}' {} | tee -a {found_q} >&4",
                    quoted.join(" ")
                )),
                MockResponse::exit(0),
            ],
        )
    };

    for i in 0..plan.fanout {
        let hexes: Vec<PathBuf> = plan.partition(i).into_iter().map(|h| manifest.hexes[h].clone()).collect();
        if i < plan.recursing {
            let mut grandchildren = Vec::new();
            for &h in &plan.partition(i) {
                for s in 0..plan.shelf_count {
                    let shelf = vec![manifest.shelf_dir(h, s)];
                    grandchildren.push(child(&scan_mission(&shelf)));
                    rules.push(scan_rule(&shelf));
                }
            }
            let mission = split_mission(&hexes);
            rules.push(MockRule::exact(
                &mission,
                vec![
                    MockResponse::call("fork", json!({ "children": grandchildren })),
                    MockResponse::exit(0),
                ],
            ));
            first_level.push(child(&mission));
        } else {
            rules.push(scan_rule(&hexes));
            first_level.push(child(&scan_mission(&hexes)));
        }
    }

    rules.push(MockRule::exact(
        &root_mission(manifest),
        vec![
            MockResponse::call("fork", json!({ "children": first_level })),
            MockResponse::sh(format!("sort -u {found_q} >&4")),
            MockResponse::exit(0),
        ],
    ));
    MockScript { rules }
}

#[derive(Debug, Clone, Serialize)]
pub struct FractalReport {
    pub plan: FractalPlan,
    pub library: LibrarySpec,
    pub needle_path: PathBuf,
    pub predicted_sessions: usize,
    pub predicted_depth: usize,
    pub session_count: usize,
    pub depth: usize,
    pub level_sizes: Vec<usize>,
    pub needle_found: bool,
    pub root_stdout: String,
    pub root_exit: String,
    /// `(mission, status)` of sessions that did not exit 0.
    pub failures: Vec<(String, Option<i32>)>,
    /// Every session exited no later than its parent.
    pub children_reaped_first: bool,
    pub trace_warnings: Vec<String>,
    pub duration_ms: u64,
    pub checks: Vec<Check>,
}

/// Generates the library, runs the scripted search and audits the traces.
pub fn run_fractal_experiment(
    spec: &LibrarySpec,
    fanout: usize,
    recursing: usize,
    cfg: &HarnessConfig,
) -> Result<FractalReport> {
    let plan = FractalPlan {
        hex_count: spec.hex_count,
        shelf_count: spec.shelf_count,
        fanout,
        recursing,
    };
    plan.validate()?;
    let dir = cfg.experiment_dir("fractal")?;
    let manifest = generate_library(spec, &dir.join("library"))?;
    let traces = dir.join("traces");
    let found = dir.join("found.txt");
    let script = install_script(&dir, &fractal_script(&plan, &manifest, &found))?;
    let env = mock_env(&script, &traces, 8);

    let out = run_quine(cfg, &env, &root_mission(&manifest), None)?;
    let root_stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let tree = reconstruct_tree(&traces)?;
    let (predicted_sessions, predicted_depth) = predicted_shape(&plan);

    let failures: Vec<(String, Option<i32>)> = tree
        .nodes
        .iter()
        .filter(|n| n.exit_status != Some(0))
        .map(|n| (n.mission.clone(), n.exit_status))
        .collect();
    let children_reaped_first = tree.nodes.iter().all(|n| match n.parent {
        None => true,
        Some(p) => match (n.exit_ts_ms, tree.nodes[p].exit_ts_ms) {
            (Some(c), Some(pt)) => c <= pt,
            _ => false,
        },
    });
    let needle = path_str(&manifest.needle_path);
    let needle_found = root_stdout == format!("{needle}\n");

    let checks = vec![
        Check::new(
            "session count",
            tree.session_count() == predicted_sessions,
            format!("{} observed, {predicted_sessions} predicted", tree.session_count()),
        ),
        Check::new(
            "tree depth",
            tree.depth() == predicted_depth && !tree.synthetic_root,
            format!("{} observed, {predicted_depth} predicted, levels {:?}", tree.depth(), tree.level_sizes()),
        ),
        Check::new("needle found", needle_found, format!("root stdout {:?}", root_stdout.trim_end())),
        Check::new("root exit", out.status.code() == Some(0), format!("status {}", out.status)),
        Check::new("all sessions exit 0", failures.is_empty(), format!("{} failure(s)", failures.len())),
        Check::new(
            "children reaped before parent exit",
            children_reaped_first,
            "exit timestamps from traces".to_string(),
        ),
    ];
    Ok(FractalReport {
        plan,
        library: spec.clone(),
        needle_path: manifest.needle_path.clone(),
        predicted_sessions,
        predicted_depth,
        session_count: tree.session_count(),
        depth: tree.depth(),
        level_sizes: tree.level_sizes(),
        needle_found,
        root_stdout,
        root_exit: out.status.to_string(),
        failures,
        children_reaped_first,
        trace_warnings: tree.warnings.clone(),
        duration_ms: out.duration.as_millis() as u64,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let p = |hex_count, shelf_count, fanout, recursing| FractalPlan {
            hex_count,
            shelf_count,
            fanout,
            recursing,
        };
        assert_eq!(predicted_shape(&p(10, 1, 10, 0)), (11, 2));
        assert_eq!(predicted_shape(&p(10, 3, 10, 2)), (17, 3));
        assert_eq!(predicted_shape(&p(4, 2, 2, 1)), (1 + 2 + 2 * 2, 3));
        assert_eq!(p(5, 1, 2, 0).partition(0), vec![0, 2, 4]);
        assert_eq!(p(5, 1, 2, 0).partition(1), vec![1, 3]);
        assert!(p(4, 1, 5, 0).validate().is_err());
        assert!(p(4, 1, 2, 3).validate().is_err());
        assert!(p(4, 9, 2, 1).validate().is_err());
    }

    #[test]
    fn script_has_one_rule_per_session() {
        let d = tempfile::tempdir().unwrap();
        let spec = LibrarySpec::new(4, 2, 1, 3);
        let m = generate_library(&spec, d.path()).unwrap();
        let plan = FractalPlan {
            hex_count: 4,
            shelf_count: 2,
            fanout: 2,
            recursing: 1,
        };
        let s = fractal_script(&plan, &m, &d.path().join("found"));
        assert_eq!(s.rules.len(), predicted_shape(&plan).0);
    }
}
