//! Report emission: a plain-text summary plus self-contained SVG charts
//! (behavior bars, layer-wise salience lines, transfer table with
//! sign-colored delta cells). Absent upstream stages are noted, never
//! fatal.

use crate::stages::{BehaviorReport, ClassifyReport, ClusterReport, Condition, TransferReport};
use crate::HarnessError;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const GREEN: &str = "#7fbf7f";
const RED: &str = "#e8a0a0";
const BLUE: &str = "#6699cc";
const CONFLICT_GREEN: &str = "#66bb66";

pub(crate) fn stage_report(out_dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>), HarnessError> {
    let behavior: Option<BehaviorReport> = try_read(out_dir.join("behave/behavior.json"));
    let cluster: Option<ClusterReport> = try_read(out_dir.join("cluster/salience.json"));
    let classify: Option<ClassifyReport> = try_read(out_dir.join("classify/classification.json"));
    let transfer: Option<TransferReport> = try_read(out_dir.join("transfer/transfer.json"));
    let probe: Option<serde_json::Value> = try_read(out_dir.join("probe/probe.json"));
    let sweep_present = out_dir.join("sweep/curves.json").exists();

    let mut text = String::new();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();

    writeln!(text, "conflictlens report").unwrap();
    writeln!(text, "===================").unwrap();

    match &behavior {
        Some(b) => {
            inputs.push(out_dir.join("behave/behavior.json"));
            writeln!(text, "\nbehavior (accuracy per condition)").unwrap();
            writeln!(
                text,
                "{:<24}{:>8}{:>10}{:>9}{:>9}{:>12}{:>8}",
                "condition", "target", "accuracy", "correct", "misled", "in_option", "out"
            )
            .unwrap();
            for c in &b.conditions {
                writeln!(
                    text,
                    "{:<24}{:>8}{:>10.3}{:>9}{:>9}{:>12}{:>8}",
                    c.condition.name(),
                    c.target.name(),
                    c.accuracy,
                    c.breakdown.correct,
                    c.breakdown.misled,
                    c.breakdown.in_option_incorrect,
                    c.breakdown.out_of_option
                )
                .unwrap();
            }
            let svg = behavior_bars_svg(b);
            let path = out_dir.join("report/behavior_bars.svg");
            crate::write_atomic(&path, svg.as_bytes())?;
            outputs.push(path);
        }
        None => writeln!(text, "\nbehave: absent").unwrap(),
    }

    match &probe {
        Some(_) => {
            inputs.push(out_dir.join("probe/probe.json"));
            writeln!(text, "\nprobe: see probe/probe_report.csv").unwrap();
        }
        None => writeln!(text, "\nprobe: absent").unwrap(),
    }

    match &cluster {
        Some(c) => {
            inputs.push(out_dir.join("cluster/salience.json"));
            writeln!(text, "\nsalience (last-layer V-gap vs accuracy)").unwrap();
            for (name, gap, acc) in &c.gap_points {
                writeln!(text, "  {name:<24} gap {gap:+.3}  accuracy {acc:.3}").unwrap();
            }
            if let Some((r, p)) = c.correlation {
                writeln!(text, "  pearson r = {r:.3} (p = {p:.2e})").unwrap();
            }
            let svg = salience_lines_svg(c);
            let path = out_dir.join("report/salience_layers.svg");
            crate::write_atomic(&path, svg.as_bytes())?;
            outputs.push(path);
        }
        None => writeln!(text, "\ncluster: absent").unwrap(),
    }

    if !sweep_present {
        writeln!(text, "\nsweep: absent").unwrap();
    }

    match &classify {
        Some(c) => {
            inputs.push(out_dir.join("classify/classification.json"));
            let counts = |ty| c.classifications.iter().filter(|x| x.head_type == ty).count();
            writeln!(
                text,
                "\nhead classification (epsilon {}): router {}, image-promotion {}, caption-promotion {}, unclassified {}",
                c.epsilon,
                counts(conflictlens_core::intervene::HeadType::Router),
                counts(conflictlens_core::intervene::HeadType::ImagePromotion),
                counts(conflictlens_core::intervene::HeadType::CaptionPromotion),
                counts(conflictlens_core::intervene::HeadType::Unclassified),
            )
            .unwrap();
        }
        None => writeln!(text, "\nclassify: absent").unwrap(),
    }

    match &transfer {
        Some(t) => {
            inputs.push(out_dir.join("transfer/transfer.json"));
            writeln!(
                text,
                "\ntransfer: head L{}H{} ({}) at alpha {}",
                t.head.0,
                t.head.1,
                t.head_type.name(),
                t.alpha
            )
            .unwrap();
            for c in &t.cells {
                writeln!(
                    text,
                    "  {:<12} {:<8} {:.3} -> {:.3}  ({:+.3})",
                    c.dataset,
                    c.target.name(),
                    c.original,
                    c.intervened,
                    c.delta
                )
                .unwrap();
            }
            let svg = transfer_table_svg(t);
            let path = out_dir.join("report/transfer_table.svg");
            crate::write_atomic(&path, svg.as_bytes())?;
            outputs.push(path);
        }
        None => writeln!(text, "\ntransfer: absent").unwrap(),
    }

    let text_path = out_dir.join("report/report.txt");
    crate::write_atomic(&text_path, text.as_bytes())?;
    outputs.push(text_path);
    Ok((inputs, outputs))
}

fn try_read<T: serde::de::DeserializeOwned>(path: PathBuf) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn svg_header(w: usize, h: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Unimodal baseline vs. conflict bars, one panel per target modality.
fn behavior_bars_svg(report: &BehaviorReport) -> String {
    let pairs = [
        (
            "target = image",
            Condition::UnimodalImage,
            Condition::InconsistentImage,
        ),
        (
            "target = caption",
            Condition::UnimodalCaption,
            Condition::InconsistentCaption,
        ),
    ];
    let (w, h) = (460usize, 220usize);
    let mut svg = svg_header(w, h);
    for (panel, (title, uni, conflict)) in pairs.iter().enumerate() {
        let x0 = 40 + panel * 210;
        let base_y = 180.0;
        let scale = 140.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"20\" font-weight=\"bold\">{title}</text>\n",
            x0
        ));
        for (i, (cond, color, label)) in [
            (uni, BLUE, "unimodal"),
            (conflict, CONFLICT_GREEN, "conflict"),
        ]
        .iter()
        .enumerate()
        {
            let acc = report.accuracy_of(**cond).unwrap_or(0.0);
            let bar_h = acc * scale;
            let x = x0 + i * 80;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{:.1}\" width=\"50\" height=\"{bar_h:.1}\" fill=\"{color}\"/>\n",
                base_y - bar_h
            ));
            svg.push_str(&format!(
                "<text x=\"{x}\" y=\"{:.1}\">{:.2}</text>\n",
                base_y - bar_h - 4.0,
                acc
            ));
            svg.push_str(&format!(
                "<text x=\"{x}\" y=\"198\">{label}</text>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Layer-wise V-Measure lines (image vs caption labels) per condition.
fn salience_lines_svg(report: &ClusterReport) -> String {
    let (w, h) = (560usize, 250usize);
    let mut svg = svg_header(w, h);
    let v_of = |cell: &serde_json::Value, modality: &str| -> f64 {
        cell.get(modality)
            .and_then(|m| m.get("v"))
            .and_then(serde_json::Value::as_f64)
            .unwrap_or(0.0)
    };
    for (panel, (name, layers)) in report.profiles.iter().enumerate() {
        let x0 = 40.0 + panel as f64 * 260.0;
        let base_y = 200.0;
        let scale = 150.0;
        let step = if layers.len() > 1 {
            200.0 / (layers.len() - 1) as f64
        } else {
            0.0
        };
        svg.push_str(&format!(
            "<text x=\"{x0}\" y=\"20\" font-weight=\"bold\">{name}</text>\n"
        ));
        for (modality, color) in [("image", BLUE), ("caption", CONFLICT_GREEN)] {
            let points: Vec<String> = layers
                .iter()
                .enumerate()
                .map(|(i, cell)| {
                    format!(
                        "{:.1},{:.1}",
                        x0 + i as f64 * step,
                        base_y - v_of(cell, modality) * scale
                    )
                })
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                points.join(" ")
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{x0}\" y=\"230\">layer 0..{} (blue: image V, green: caption V)</text>\n",
            layers.len().saturating_sub(1)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Transfer table with delta cells colored by sign.
fn transfer_table_svg(report: &TransferReport) -> String {
    let rows = report.cells.len();
    let (w, h) = (520usize, 60 + rows * 24);
    let mut svg = svg_header(w, h);
    svg.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-weight=\"bold\">transfer at alpha {} (head L{}H{}, {})</text>\n",
        report.alpha,
        report.head.0,
        report.head.1,
        report.head_type.name()
    ));
    svg.push_str(
        "<text x=\"10\" y=\"44\">dataset</text><text x=\"140\" y=\"44\">target</text>\
         <text x=\"230\" y=\"44\">original</text><text x=\"320\" y=\"44\">intervened</text>\
         <text x=\"420\" y=\"44\">delta</text>\n",
    );
    for (i, cell) in report.cells.iter().enumerate() {
        let y = 52 + i * 24;
        let fill = if cell.delta >= 0.0 { GREEN } else { RED };
        svg.push_str(&format!(
            "<rect x=\"410\" y=\"{y}\" width=\"100\" height=\"20\" fill=\"{fill}\"/>\n"
        ));
        let ty = y + 15;
        svg.push_str(&format!(
            "<text x=\"10\" y=\"{ty}\">{}</text><text x=\"140\" y=\"{ty}\">{}</text>\
             <text x=\"230\" y=\"{ty}\">{:.3}</text><text x=\"320\" y=\"{ty}\">{:.3}</text>\
             <text x=\"420\" y=\"{ty}\">{:+.3}</text>\n",
            cell.dataset,
            cell.target.name(),
            cell.original,
            cell.intervened,
            cell.delta
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
