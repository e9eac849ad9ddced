//! Trainable-parameter accounting.
//!
//! Two independent paths: [`audit`] evaluates closed forms from a channel
//! description, [`walker_count`] sums the tensors a constructed network would
//! actually update. Golden scenarios for the X3D-M channel layout compare the
//! closed forms with published megaparameter figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterKind;
use crate::backbone::ChannelSpec;
use crate::error::{Error, Result};
use crate::network::{InsertionConfig, MdlNetwork};
use crate::real::Real;
use crate::tensor::ParamTag;

/// Absolute tolerance in megaparameters for golden comparisons.
pub const TOLERANCE_M: f64 = 0.01;

/// Backbone size (without head) supplied for X3D-M, which is not implemented here.
pub const X3D_M_BASE_PARAMS: usize = 2_970_000;

/// One row of published class counts: HMDB51, UCF101, Kinetics-400.
pub const X3D_DOMAINS: [usize; 3] = [51, 101, 400];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditScenario {
    pub name: String,
    pub channel_spec: ChannelSpec,
    pub adapter_kind: AdapterKind,
    pub insertion: InsertionConfig,
    /// Class count of each domain.
    pub domains: Vec<usize>,
    pub trainable_base: bool,
    pub base_param_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainBudget {
    pub head: usize,
    pub adapters: usize,
}

/// Trainable parameter counts by component.
///
/// `shared_norm` holds the per-location layer norms shared by all domains;
/// they are trained even when the backbone is frozen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub base: usize,
    pub heads: usize,
    pub adapters: usize,
    pub shared_norm: usize,
    pub total: usize,
    /// Keyed by 1-based domain position.
    pub per_domain: BTreeMap<usize, DomainBudget>,
    /// Adapter parameters at each location, summed over domains.
    pub per_location: BTreeMap<usize, usize>,
}

impl ParamBudget {
    fn finish(mut self) -> Self {
        self.total = self.base + self.heads + self.adapters + self.shared_norm;
        self
    }

    pub fn component(&self, c: Component) -> usize {
        match c {
            Component::Base => self.base,
            Component::Heads => self.heads,
            Component::Adapters => self.adapters,
            Component::SharedNorm => self.shared_norm,
            Component::Total => self.total,
        }
    }
}

pub fn audit(s: &AuditScenario) -> Result<ParamBudget> {
    let spec = &s.channel_spec;
    let locations = s.insertion.locations(spec.num_locations())?;
    let mut b = ParamBudget::default();
    let per_domain_adapters: usize = locations.iter().map(|&l| s.adapter_kind.block_params(spec.at(l))).sum();
    for (i, &n) in s.domains.iter().enumerate() {
        let head = n * (spec.head_width + 1);
        b.heads += head;
        b.adapters += per_domain_adapters;
        b.per_domain.insert(
            i + 1,
            DomainBudget {
                head,
                adapters: per_domain_adapters,
            },
        );
    }
    for &l in &locations {
        b.per_location.insert(l, s.domains.len() * s.adapter_kind.block_params(spec.at(l)));
    }
    b.shared_norm = locations.iter().map(|&l| 2 * spec.at(l)).sum();
    b.base = if s.trainable_base { s.base_param_count } else { 0 };
    Ok(b.finish())
}

/// Counts the parameters `net` would update, grouped by tag and parsed
/// from the `adapter/{d}/{loc}/…` and `head/{d}/…` names.
pub fn walker_count<T: Real>(net: &MdlNetwork<T>) -> ParamBudget {
    let mut b = ParamBudget::default();
    let position: BTreeMap<usize, usize> = net
        .domains()
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id.get(), i + 1))
        .collect();
    for (tag, p) in net.trainable_params() {
        let n = p.tensor.numel();
        let mut parts = p.name.split('/').skip(1).map(|s| s.parse::<usize>().ok());
        match tag {
            ParamTag::Base => b.base += n,
            ParamTag::PostNorm => b.shared_norm += n,
            ParamTag::Head => {
                b.heads += n;
                if let Some(pos) = parts.next().flatten().and_then(|d| position.get(&d)) {
                    b.per_domain.entry(*pos).or_default().head += n;
                }
            }
            ParamTag::Adapter => {
                b.adapters += n;
                let (d, loc) = (parts.next().flatten(), parts.next().flatten());
                if let Some(pos) = d.and_then(|d| position.get(&d)) {
                    b.per_domain.entry(*pos).or_default().adapters += n;
                }
                if let Some(loc) = loc {
                    *b.per_location.entry(loc).or_default() += n;
                }
            }
        }
    }
    b.finish()
}

/// The closed-form scenario describing a constructed toy network.
pub fn scenario_of<T: Real>(net: &MdlNetwork<T>) -> AuditScenario {
    let cfg = net.config();
    AuditScenario {
        name: "toy".into(),
        channel_spec: net.channel_spec(),
        adapter_kind: cfg.adapter_kind,
        insertion: cfg.insertion,
        domains: net.domains().iter().map(|d| d.num_classes).collect(),
        trainable_base: net.trainable_base(),
        base_param_count: net.backbone().num_params(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Base,
    Heads,
    Adapters,
    SharedNorm,
    Total,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Base => "base",
            Component::Heads => "head",
            Component::Adapters => "adap.",
            Component::SharedNorm => "shared-ln",
            Component::Total => "total",
        }
    }
}

/// A published figure for one component of a scenario.
///
/// `checked` is false for figures that depend on the supplied backbone
/// constant; those are reported but do not gate the audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub component: Component,
    pub paper_m: f64,
    pub checked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenScenario {
    /// Table the scenario belongs to, used to group the report.
    pub group: String,
    pub scenario: AuditScenario,
    pub expect: Vec<Expectation>,
}

/// Count in megaparameters rounded half-up to two decimals.
pub fn round_m(count: usize) -> f64 {
    ((count + 5_000) / 10_000) as f64 / 100.0
}

pub fn within_tolerance(count: usize, paper_m: f64) -> bool {
    (count as f64 / 1e6 - paper_m).abs() <= TOLERANCE_M + 1e-9
}

fn x3d(name: &str, kind: AdapterKind, insertion: InsertionConfig, domains: &[usize], trainable_base: bool) -> AuditScenario {
    AuditScenario {
        name: name.into(),
        channel_spec: ChannelSpec::x3d_m(),
        adapter_kind: kind,
        insertion,
        domains: domains.to_vec(),
        trainable_base,
        base_param_count: X3D_M_BASE_PARAMS,
    }
}

fn golden(group: &str, scenario: AuditScenario, figures: &[(Component, Option<f64>)]) -> GoldenScenario {
    let expect = figures
        .iter()
        .map(|&(component, v)| {
            let checked = match component {
                Component::Base => false,
                Component::Total => !scenario.trainable_base,
                _ => true,
            };
            // "---" in a table means no such parameters
            let paper_m = v.unwrap_or(0.0);
            Expectation {
                component,
                paper_m,
                checked: checked || v.is_none(),
            }
        })
        .collect();
    GoldenScenario {
        group: group.into(),
        scenario,
        expect,
    }
}

/// Golden scenarios for the X3D-M channel layout: adapter kinds, frozen
/// versus trained backbone, insertion configurations and domain subsets.
pub fn x3d_golden() -> Vec<GoldenScenario> {
    use AdapterKind::*;
    use Component::*;
    let all3 = &X3D_DOMAINS[..];
    let row = |total: f64, base: Option<f64>, head: f64, adap: Option<f64>| {
        vec![(Total, Some(total)), (Base, base), (Heads, Some(head)), (Adapters, adap)]
    };
    let mut out = Vec::new();
    for (kind, total, adap) in [(Framewise2D, 5.45, 1.34), (SeparableST, 5.89, 1.79), (Full3D, 8.12, 4.02)] {
        out.push(golden(
            "table1",
            x3d(&format!("adapter-{}", kind.label()), kind, InsertionConfig::All, all3, true),
            &row(total, Some(2.97), 1.13, Some(adap)),
        ));
    }
    out.push(golden(
        "table2",
        x3d("fix-train", SeparableST, InsertionConfig::All, all3, false),
        &row(2.91, None, 1.13, Some(1.79)),
    ));
    out.push(golden(
        "table2",
        x3d("train-train", SeparableST, InsertionConfig::All, all3, true),
        &row(5.89, Some(2.97), 1.13, Some(1.79)),
    ));
    for (ins, total, adap) in [
        (InsertionConfig::Early(1), 4.13, Some(0.02)),
        (InsertionConfig::Early(3), 4.23, Some(0.13)),
        (InsertionConfig::Late(3), 5.85, Some(1.75)),
        (InsertionConfig::Late(1), 5.44, Some(1.33)),
        (InsertionConfig::MultiHead, 4.11, None),
        (InsertionConfig::All, 5.89, Some(1.79)),
    ] {
        out.push(golden(
            "table3",
            x3d(&ins.to_string(), SeparableST, ins, all3, true),
            &row(total, Some(2.97), 1.13, adap),
        ));
    }
    let subsets: [(&[usize], f64); 3] = [(&[51], 0.10), (&[101], 0.21), (&[400], 0.82)];
    for (i, (doms, head)) in subsets.iter().enumerate() {
        let total = [3.08, 3.18, 3.79][i];
        out.push(golden(
            "table4a",
            x3d(&format!("single-{}", doms[0]), SeparableST, InsertionConfig::MultiHead, doms, true),
            &row(total, Some(2.97), *head, None),
        ));
    }
    let rows_a: [(&[usize], f64, f64, f64); 7] = [
        (&[51], 3.68, 0.10, 0.60),
        (&[101], 3.78, 0.21, 0.60),
        (&[400], 4.39, 0.82, 0.60),
        (&[51, 101], 4.48, 0.31, 1.19),
        (&[51, 400], 5.10, 0.92, 1.19),
        (&[101, 400], 5.19, 1.03, 1.19),
        (&[51, 101, 400], 5.89, 1.13, 1.79),
    ];
    let rows_b: [(f64, f64); 7] = [
        (3.09, 0.01),
        (3.19, 0.01),
        (3.80, 0.01),
        (3.30, 0.01),
        (3.91, 0.01),
        (4.02, 0.01),
        (4.13, 0.02),
    ];
    for ((doms, total, head, adap), (total_b, adap_b)) in rows_a.iter().zip(rows_b) {
        let tag = doms.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("+");
        out.push(golden(
            "table4a",
            x3d(&format!("all/{tag}"), SeparableST, InsertionConfig::All, doms, true),
            &row(*total, Some(2.97), *head, Some(*adap)),
        ));
        out.push(golden(
            "table4b",
            x3d(&format!("early-1/{tag}"), SeparableST, InsertionConfig::Early(1), doms, true),
            &row(total_b, Some(2.97), *head, Some(adap_b)),
        ));
    }
    out
}

/// Scenarios without published figures for an arbitrary channel layout:
/// every adapter kind at all locations for the three reference domains.
pub fn custom_scenarios(spec: &ChannelSpec) -> Vec<GoldenScenario> {
    AdapterKind::ALL
        .iter()
        .map(|&kind| GoldenScenario {
            group: spec.name.clone(),
            scenario: AuditScenario {
                name: format!("adapter-{}", kind.label()),
                channel_spec: spec.clone(),
                adapter_kind: kind,
                insertion: InsertionConfig::All,
                domains: X3D_DOMAINS.to_vec(),
                trainable_base: false,
                base_param_count: 0,
            },
            expect: Vec::new(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub scenario: String,
    pub component: Component,
    pub count: usize,
    pub paper_m: Option<f64>,
    /// `None` for informational rows.
    pub pass: Option<bool>,
}

impl ReportRow {
    pub fn ours_m(&self) -> f64 {
        self.count as f64 / 1e6
    }
}

/// Audits every scenario; components with published figures are compared,
/// the others are listed for reference.
pub fn report_rows(scenarios: &[GoldenScenario]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for g in scenarios {
        let budget = audit(&g.scenario)?;
        for component in [
            Component::Total,
            Component::Base,
            Component::Heads,
            Component::Adapters,
            Component::SharedNorm,
        ] {
            let count = budget.component(component);
            let exp = g.expect.iter().find(|e| e.component == component);
            rows.push(ReportRow {
                group: g.group.clone(),
                scenario: g.scenario.name.clone(),
                component,
                count,
                paper_m: exp.map(|e| e.paper_m),
                pass: exp.filter(|e| e.checked).map(|e| within_tolerance(count, e.paper_m)),
            });
        }
    }
    Ok(rows)
}

pub fn all_pass(rows: &[ReportRow]) -> bool {
    rows.iter().all(|r| r.pass != Some(false))
}

/// Plain-text tables, one block per group, values in M rounded to 2 decimals.
pub fn render_text(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let mut group = None;
    for r in rows {
        if group != Some(&r.group) {
            group = Some(&r.group);
            let _ = writeln!(out, "\n[{}]", r.group);
            let _ = writeln!(
                out,
                "{:<22} {:<10} {:>9} {:>9} {:>6}",
                "scenario", "component", "ours(M)", "ref(M)", "check"
            );
        }
        let paper = r.paper_m.map_or("-".to_string(), |v| format!("{v:.2}"));
        let check = match r.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "info",
        };
        let _ = writeln!(
            out,
            "{:<22} {:<10} {:>9.2} {:>9} {:>6}",
            r.scenario,
            r.component.label(),
            round_m(r.count),
            paper,
            check
        );
    }
    if !rows.is_empty() {
        let checked = rows.iter().filter(|r| r.pass.is_some()).count();
        let failed = rows.iter().filter(|r| r.pass == Some(false)).count();
        let _ = writeln!(
            out,
            "\n{checked} checked rows, {failed} failed (tolerance ±{TOLERANCE_M} M on unrounded counts)"
        );
        let _ = writeln!(out, "shared-ln rows are trainable layer-norm parameters shared by all domains");
    }
    out
}

/// CSV with columns `scenario, component, ours_M, paper_M, pass`.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("scenario,component,ours_M,paper_M,pass\n");
    for r in rows {
        let paper = r.paper_m.map(|v| format!("{v:.2}")).unwrap_or_default();
        let pass = r.pass.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{}/{},{},{:.6},{},{}",
            r.group,
            r.scenario,
            r.component.label(),
            r.ours_m(),
            paper,
            pass
        );
    }
    out
}

/// Walker-based budget of a network plus the closed-form one for the same
/// configuration; handy for checking a toy model before training.
pub fn audit_network<T: Real>(net: &MdlNetwork<T>) -> Result<(ParamBudget, ParamBudget)> {
    let walked = walker_count(net);
    let closed = audit(&scenario_of(net))?;
    Ok((walked, closed))
}

/// Resolves the argument of the `audit` command: the builtin `x3d-m` with
/// its golden figures, or a TOML channel-spec file without any.
pub fn audit_command(spec: &str) -> Result<(String, Vec<ReportRow>)> {
    let (name, scenarios) = if spec == "x3d-m" {
        ("x3d-m".to_string(), x3d_golden())
    } else {
        let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
        let cs = ChannelSpec::parse(&text, spec)?;
        (cs.name.clone(), custom_scenarios(&cs))
    };
    Ok((name, report_rows(&scenarios)?))
}
