use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CampaignReport, CriticalAccounting, VariantMetrics};
use crate::error::Result;
use crate::faultsim::VariantKind;

pub const REPORT_FILES: [&str; 5] = [
    "acc_loss.csv",
    "critical_faults.csv",
    "neuron_counts.csv",
    "criticality.csv",
    "metrics.csv",
];

/// `x` with 6 significant digits in plain decimal notation.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0.00000".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if exp < 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    } else {
        let point = exp as usize + 1;
        if point >= digits.len() {
            out.push_str(&digits);
            out.extend(std::iter::repeat_n('0', point - digits.len()));
        } else {
            out.push_str(&digits[..point]);
            out.push('.');
            out.push_str(&digits[point..]);
        }
    }
    out
}

/// Threshold as a percentage: `0.05 -> "5"`, `0.125 -> "12.5"`.
pub fn nvf_label(threshold: f64) -> String {
    let p = threshold * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

fn kind_name(kind: VariantKind) -> &'static str {
    kind.label()
}

fn wide_table(report: &CampaignReport, value: impl Fn(&VariantMetrics) -> String) -> String {
    let mut out = String::from("NVF,Unprotected,Proposed,TMR\n");
    for &t in &report.config.thresholds {
        out.push_str(&nvf_label(t));
        for kind in VariantKind::ALL {
            out.push(',');
            if let Some(m) = report.metrics(kind, t) {
                out.push_str(&value(m));
            }
        }
        out.push('\n');
    }
    out
}

fn metrics_table(report: &CampaignReport) -> String {
    let mut out = String::from(
        "NVF,variant,protected_neurons,neuron_count,faults_enumerated,sample_size,baseline_accuracy,mean_faulty_accuracy,accuracy_loss,critical_fault_fraction,total_flips,critical_faults\n",
    );
    for m in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            nvf_label(m.threshold),
            kind_name(m.variant),
            m.protected_neurons,
            m.neuron_count,
            m.faults_enumerated,
            m.sample_size,
            format_sig(m.baseline_accuracy),
            format_sig(m.mean_faulty_accuracy),
            format_sig(m.accuracy_loss),
            format_sig(m.critical_fault_fraction),
            m.total_flips,
            m.critical_faults
        )
        .expect("write to string");
    }
    out
}

fn criticality_csv(report: &CampaignReport) -> String {
    let mut out = String::from("NVF,neurons,portion\n");
    for row in &report.criticality {
        writeln!(out, "{},{},{}", nvf_label(row.threshold), row.neurons, format_sig(row.portion)).expect("write to string");
    }
    out
}

/// Writes the report CSVs into `out_dir` (created if missing) and, when
/// `charts` is set, one SVG line chart per wide table. Returns the paths.
pub fn write_report(report: &CampaignReport, out_dir: &Path, charts: bool) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let tables = [
        ("acc_loss", "Accuracy loss", wide_table(report, |m| format_sig(m.accuracy_loss))),
        (
            "critical_faults",
            "Critical faults",
            wide_table(report, |m| format_sig(m.critical_fault_fraction)),
        ),
        ("neuron_counts", "Neurons", wide_table(report, |m| m.neuron_count.to_string())),
    ];
    let mut written = Vec::new();
    let mut put = |name: String, body: &str| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    for (stem, title, body) in &tables {
        put(format!("{stem}.csv"), body)?;
        if charts {
            put(format!("{stem}.svg"), &line_chart(title, report))?;
        }
    }
    put("criticality.csv".into(), &criticality_csv(report))?;
    put("metrics.csv".into(), &metrics_table(report))?;
    Ok(written)
}

fn chart_values(title: &str, m: &VariantMetrics) -> f64 {
    match title {
        "Accuracy loss" => m.accuracy_loss,
        "Critical faults" => m.critical_fault_fraction,
        _ => m.neuron_count as f64,
    }
}

fn line_chart(title: &str, report: &CampaignReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let colors = ["#d62728", "#1f77b4", "#2ca02c"];
    let ts = &report.config.thresholds;
    let t_max = ts.iter().copied().fold(0.0, f64::max).max(f64::EPSILON);
    let y_max = report
        .rows
        .iter()
        .map(|m| chart_values(title, m))
        .fold(0.0, f64::max)
        .max(f64::EPSILON);
    let x = |t: f64| PAD + t / t_max * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - v / y_max * (H - 2.0 * PAD);

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0).unwrap();
    writeln!(svg, r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#, H - PAD, W - PAD).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">NVF threshold (%)</text>"#, W / 2.0, H - 10.0).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, PAD + 4.0, format_sig(y_max)).unwrap();
    for &t in ts {
        writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x(t), H - PAD + 14.0, nvf_label(t)).unwrap();
    }
    for (i, kind) in VariantKind::ALL.into_iter().enumerate() {
        let points: Vec<String> = ts
            .iter()
            .filter_map(|&t| report.metrics(kind, t).map(|m| format!("{:.1},{:.1}", x(t), y(chart_values(title, m)))))
            .collect();
        writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, points.join(" "), colors[i]).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" fill="{}">{}</text>"#, W - PAD - 70.0, PAD + 14.0 * i as f64, colors[i], kind.label()).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Internal consistency laws of a report; each violation is described.
pub fn check_report(report: &CampaignReport) -> Vec<String> {
    let mut problems = Vec::new();
    let inputs = report.test_size as f64;
    for m in &report.rows {
        let at = format!("{} at NVF {}", m.variant.label(), nvf_label(m.threshold));
        for (name, v) in [
            ("baseline accuracy", m.baseline_accuracy),
            ("mean faulty accuracy", m.mean_faulty_accuracy),
            ("critical fault fraction", m.critical_fault_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{at}: {name} {v} outside [0, 1]"));
            }
        }
        if m.accuracy_loss != m.baseline_accuracy - m.mean_faulty_accuracy {
            problems.push(format!("{at}: accuracy loss is not baseline minus mean faulty accuracy"));
        }
        if m.faults_enumerated != m.neuron_count * 8 || m.sample_size > m.faults_enumerated {
            problems.push(format!("{at}: fault space or sample size inconsistent"));
        }
        let expected = match report.config.accounting {
            CriticalAccounting::PerPair if m.sample_size > 0 => m.total_flips as f64 / (m.sample_size as f64 * inputs),
            CriticalAccounting::PerFault if m.sample_size > 0 => m.critical_faults as f64 / m.sample_size as f64,
            _ => 0.0,
        };
        if m.critical_fault_fraction != expected {
            problems.push(format!("{at}: critical fault fraction disagrees with flip counts"));
        }
    }
    let mut previous: Option<[usize; 3]> = None;
    for &t in &report.config.thresholds {
        let counts = VariantKind::ALL.map(|k| report.metrics(k, t).map_or(0, |m| m.neuron_count));
        let [plain, split, tmr] = counts;
        if split < plain || tmr < plain || 2 * (split - plain) != tmr - plain {
            problems.push(format!(
                "NVF {}: overhead law violated ({plain}, {split}, {tmr})",
                nvf_label(t)
            ));
        }
        if let Some(prev) = previous {
            if counts.iter().zip(prev).any(|(c, p)| *c > p) {
                problems.push(format!("NVF {}: neuron counts increase with threshold", nvf_label(t)));
            }
        }
        previous = Some(counts);
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::CampaignConfig;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig(0.0), "0.00000");
        assert_eq!(format_sig(0.5), "0.500000");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig(0.0123456789), "0.0123457");
        assert_eq!(format_sig(-0.25), "-0.250000");
        assert_eq!(format_sig(123.4567), "123.457");
        assert_eq!(format_sig(1234567.0), "1234570");
        assert_eq!(format_sig(9.999999), "10.0000");
    }

    #[test]
    fn nvf_labels() {
        let labels: Vec<String> = crate::analysis::default_thresholds().into_iter().map(nvf_label).collect();
        assert_eq!(labels, ["0", "5", "10", "15", "20", "25", "30", "35", "40", "45", "50"]);
        assert_eq!(nvf_label(0.125), "12.5");
    }

    #[test]
    fn empty_threshold_list_gives_header_only_csvs() {
        let report = CampaignReport {
            config: CampaignConfig { thresholds: Vec::new(), ..Default::default() },
            test_size: 4,
            source_neurons: 3,
            rows: Vec::new(),
            criticality: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path(), true).unwrap();
        let read = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(read("acc_loss.csv"), "NVF,Unprotected,Proposed,TMR\n");
        assert_eq!(read("critical_faults.csv"), "NVF,Unprotected,Proposed,TMR\n");
        assert_eq!(read("neuron_counts.csv"), "NVF,Unprotected,Proposed,TMR\n");
        assert_eq!(read("criticality.csv"), "NVF,neurons,portion\n");
        assert!(read("acc_loss.svg").starts_with("<svg"));
        assert!(check_report(&report).is_empty());
    }
}
