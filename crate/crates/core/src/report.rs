//! Comma-separated tables and loss curves from metric files and logs.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::metrics::{percent_cell, MetricReport};
use crate::render::line_plot;
use crate::trainer::LogEntry;

/// Headline scores as `metric,value` rows scaled by 100.
pub fn metric_table(report: &MetricReport) -> String {
    report.to_csv()
}

/// Side-by-side headline scores of two reports, joined on metric name.
pub fn comparison_table(a_name: &str, a: &MetricReport, b_name: &str, b: &MetricReport) -> String {
    let mut s = format!("metric,{a_name},{b_name}\n");
    for ((name, va), (_, vb)) in a.headline().into_iter().zip(b.headline()) {
        s.push_str(&format!("{name},{},{}\n", percent_cell(va), percent_cell(vb)));
    }
    s
}

/// `step,total,class,l1,giou,dice` rows of the step entries.
pub fn loss_table(log: &[LogEntry]) -> Result<String> {
    let mut s = String::from("step,total,class,l1,giou,dice\n");
    let mut any = false;
    for e in log {
        if let LogEntry::Step(st) = e {
            let l = &st.loss;
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                st.step, l.total, l.class_loss, l.l1_loss, l.giou_loss, l.dice_loss
            ));
            any = true;
        }
    }
    if !any {
        return Err(Error::Data("log has no step entries".into()));
    }
    Ok(s)
}

/// Total loss (first series) and its components against step.
pub fn loss_curve(log: &[LogEntry], width: u32, height: u32) -> RgbImage {
    let mut series = vec![Vec::new(); 5];
    for e in log {
        if let LogEntry::Step(st) = e {
            let x = st.step as f64;
            let l = &st.loss;
            for (i, v) in [l.total, l.class_loss, l.l1_loss, l.giou_loss, l.dice_loss].into_iter().enumerate() {
                series[i].push((x, v));
            }
        }
    }
    line_plot(&series, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(miou: f64) -> MetricReport {
        MetricReport {
            map_50_95: Some(0.5),
            map_50: Some(0.9),
            map_75: None,
            per_class_ap: BTreeMap::new(),
            miou: Some(miou),
            dice: Some(0.9),
            per_class_iou: BTreeMap::new(),
        }
    }

    #[test]
    fn table_scales_by_hundred() {
        let t = metric_table(&report(0.824));
        assert!(t.contains(",82.4\n"), "{t}");
        assert!(t.contains(",-\n"));
    }

    #[test]
    fn comparison_joins_on_name() {
        let t = comparison_table("a", &report(0.8), "b", &report(0.7));
        let line = t.lines().find(|l| l.starts_with("miou")).unwrap();
        assert_eq!(line, "miou,80.0,70.0");
    }

    #[test]
    fn loss_table_needs_steps() {
        assert!(loss_table(&[]).is_err());
    }
}
