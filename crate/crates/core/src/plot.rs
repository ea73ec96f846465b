//! Self-contained SVG figures: PCI by cardinality, success probability by ρ,
//! and Kaplan-Meier curves by responder class.

use std::fmt::Write;

use crate::responders::{ResponderClass, SuccessCurve};
use crate::search::SearchResult;
use crate::survival::{ArmComparison, ArmSurvival, ClassAudit, LogRankResult, SubgroupAudit};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const FONT: &str = "font-family=\"Helvetica, Arial, sans-serif\"";

const GOOD: &str = "#1b7837";
const BAD: &str = "#b2182b";
const RARE: &str = "#878787";
const TREATED: &str = "#2166ac";
const CONTROL: &str = "#d6604d";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick label without trailing zeros.
fn label(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Roughly `n` round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / n.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step + 1e-9).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

struct Canvas {
    out: String,
}

/// Linear map from data coordinates into a pixel rectangle.
#[derive(Clone, Copy)]
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.x0) / (self.x1 - self.x0) * self.width
    }

    fn y(&self, v: f64) -> f64 {
        self.top + self.height - (v - self.y0) / (self.y1 - self.y0) * self.height
    }

    fn bottom(&self) -> f64 {
        self.top + self.height
    }
}

impl Canvas {
    fn new(title: &str) -> Canvas {
        let mut out = String::new();
        writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
        )
        .unwrap();
        writeln!(out, "<title>{}</title>", escape(title)).unwrap();
        writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
        Canvas { out }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        writeln!(
            self.out,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"{size}\" text-anchor=\"{anchor}\" {FONT}>{}</text>",
            escape(s)
        )
        .unwrap();
    }

    fn rotated_text(&mut self, x: f64, y: f64, s: &str) {
        writeln!(
            self.out,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 {x:.2} {y:.2})\" {FONT}>{}</text>",
            escape(s)
        )
        .unwrap();
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, extra: &str) {
        writeln!(
            self.out,
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{stroke}\"{extra}/>"
        )
        .unwrap();
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, extra: &str) {
        if pts.is_empty() {
            return;
        }
        let mut d = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            if i > 0 {
                d.push(' ');
            }
            write!(d, "{x:.2},{y:.2}").unwrap();
        }
        writeln!(
            self.out,
            "<polyline points=\"{d}\" fill=\"none\" stroke=\"{stroke}\"{extra}/>"
        )
        .unwrap();
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        writeln!(self.out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r}\" fill=\"{fill}\"/>").unwrap();
    }

    fn axes(&mut self, f: &Frame, xticks: &[f64], yticks: &[f64], xlabel: &str, ylabel: &str) {
        self.line(f.left, f.bottom(), f.left + f.width, f.bottom(), "black", "");
        self.line(f.left, f.top, f.left, f.bottom(), "black", "");
        for &t in xticks {
            let x = f.x(t);
            self.line(x, f.bottom(), x, f.bottom() + 5.0, "black", "");
            self.text(x, f.bottom() + 18.0, 11.0, "middle", &label(t));
        }
        for &t in yticks {
            let y = f.y(t);
            self.line(f.left - 5.0, y, f.left, y, "black", "");
            self.line(f.left, y, f.left + f.width, y, "#e0e0e0", "");
            self.text(f.left - 8.0, y + 4.0, 11.0, "end", &label(t));
        }
        self.text(f.left + f.width / 2.0, f.bottom() + 38.0, 13.0, "middle", xlabel);
        self.rotated_text(f.left - 42.0, f.top + f.height / 2.0, ylabel);
    }

    fn legend(&mut self, x: f64, y: f64, items: &[(&str, &str, &str)]) {
        for (i, (name, color, dash)) in items.iter().enumerate() {
            let yy = y + i as f64 * 18.0;
            self.line(x, yy, x + 24.0, yy, color, &format!(" stroke-width=\"2\"{dash}"));
            self.text(x + 30.0, yy + 4.0, 11.0, "start", name);
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Minimum, mean and maximum PCI of each cardinality's champion.
pub fn pci_by_cardinality(search: &SearchResult) -> String {
    let mut c = Canvas::new("PCI of the best model by number of predictors");
    let kmax = search.champions.len().max(1) as f64;
    let f = Frame {
        left: 70.0,
        top: 50.0,
        width: WIDTH - 200.0,
        height: HEIGHT - 120.0,
        x0: 0.5,
        x1: kmax + 0.5,
        y0: 0.0,
        y1: 1.0,
    };
    c.text(WIDTH / 2.0, 28.0, 15.0, "middle", "PCI of the best model by number of predictors");
    let xticks: Vec<f64> = (1..=search.champions.len()).map(|k| k as f64).collect();
    c.axes(&f, &xticks, &ticks(0.0, 1.0, 5), "number of predictors", "PCI");
    let ty = f.y(search.threshold);
    c.line(f.left, ty, f.left + f.width, ty, "black", " stroke-dasharray=\"6 4\"");
    c.text(f.left + f.width - 4.0, ty - 6.0, 11.0, "end", &format!("threshold {}", label(search.threshold)));
    let series: [(&str, &str, fn(&crate::causal::PciProfile) -> f64); 3] = [
        ("maximum", "#4393c3", |p| p.pci_max),
        ("mean", "#2d004b", |p| p.pci_mean),
        ("minimum", "#d6604d", |p| p.pci_min),
    ];
    for (_, color, get) in &series {
        let pts: Vec<(f64, f64)> = search
            .champions
            .iter()
            .enumerate()
            .filter_map(|(i, ch)| ch.as_ref().map(|p| (f.x((i + 1) as f64), f.y(get(p)))))
            .collect();
        c.polyline(&pts, color, " stroke-width=\"2\"");
        for (x, y) in pts {
            c.circle(x, y, 3.0, color);
        }
    }
    if let Some(sel) = &search.selected {
        let x = f.x(sel.subset.len() as f64);
        c.line(x, f.top, x, f.bottom(), "#1b7837", " stroke-dasharray=\"2 3\"");
        c.text(x + 4.0, f.top + 12.0, 11.0, "start", &format!("selected: {} predictors", sel.subset.len()));
    }
    c.legend(
        f.left + f.width + 20.0,
        f.top + 10.0,
        &[
            ("maximum", series[0].1, ""),
            ("mean", series[1].1, ""),
            ("minimum", series[2].1, ""),
            ("threshold", "black", " stroke-dasharray=\"6 4\""),
        ],
    );
    c.finish()
}

fn class_color(class: ResponderClass) -> &'static str {
    match class {
        ResponderClass::Good => GOOD,
        ResponderClass::Rare => RARE,
        ResponderClass::Bad => BAD,
    }
}

/// Probability of treatment success against ρ, one line per patient.
pub fn success_by_rho(curves: &[SuccessCurve], title: &str) -> String {
    let mut c = Canvas::new(title);
    let f = Frame {
        left: 70.0,
        top: 50.0,
        width: WIDTH - 200.0,
        height: HEIGHT - 120.0,
        x0: -1.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    c.text(WIDTH / 2.0, 28.0, 15.0, "middle", title);
    c.axes(&f, &ticks(-1.0, 1.0, 8), &ticks(0.0, 1.0, 5), "rho", "probability of treatment success");
    c.line(f.left, f.y(0.5), f.left + f.width, f.y(0.5), "black", " stroke-dasharray=\"6 4\"");
    for curve in curves {
        let pts: Vec<(f64, f64)> = curve
            .rhos
            .iter()
            .zip(&curve.prob_by_rho)
            .map(|(&r, &p)| (f.x(r), f.y(p)))
            .collect();
        c.polyline(&pts, class_color(curve.classification), " stroke-width=\"1\" stroke-opacity=\"0.6\"");
    }
    let count = |k| curves.iter().filter(|c| c.classification == k).count();
    let names: Vec<String> = [ResponderClass::Good, ResponderClass::Rare, ResponderClass::Bad]
        .iter()
        .map(|&k| format!("{k} ({})", count(k)))
        .collect();
    c.legend(
        f.left + f.width + 20.0,
        f.top + 10.0,
        &[(&names[0], GOOD, ""), (&names[1], RARE, ""), (&names[2], BAD, "")],
    );
    c.finish()
}

fn km_points(arm: &ArmSurvival, f: &Frame) -> Vec<(f64, f64)> {
    let mut pts = vec![(f.x(0.0), f.y(1.0))];
    let mut s = 1.0;
    for (&t, &next) in arm.km.event_times.iter().zip(&arm.km.survival) {
        pts.push((f.x(t), f.y(s)));
        pts.push((f.x(t), f.y(next)));
        s = next;
    }
    pts.push((f.x(arm.km.last_time), f.y(s)));
    pts
}

struct Panel<'a> {
    title: String,
    treated: Option<&'a ArmSurvival>,
    control: Option<&'a ArmSurvival>,
    log_rank: Option<&'a LogRankResult>,
}

impl<'a> Panel<'a> {
    fn of_class(audit: &'a ClassAudit) -> Panel<'a> {
        Panel {
            title: format!("{} responders", audit.class),
            treated: audit.treated.as_ref(),
            control: audit.control.as_ref(),
            log_rank: audit.log_rank.as_ref(),
        }
    }
}

fn km_panel(c: &mut Canvas, panel: &Panel, f: Frame, tmax: f64) {
    let p = match panel.log_rank {
        Some(lr) if lr.p_value < 0.001 => "log-rank p < 0.001".into(),
        Some(lr) => format!("log-rank p = {:.3}", lr.p_value),
        None => "log-rank not computed".into(),
    };
    c.text(f.left + f.width / 2.0, f.top - 12.0, 13.0, "middle", &format!("{}: {p}", panel.title));
    let xt = ticks(0.0, tmax, 6);
    c.axes(&f, &xt, &ticks(0.0, 1.0, 5), "time", "survival");
    for (arm, color, dash) in [(panel.treated, TREATED, ""), (panel.control, CONTROL, " stroke-dasharray=\"6 3\"")] {
        if let Some(a) = arm {
            c.polyline(&km_points(a, &f), color, &format!(" stroke-width=\"2\"{dash}"));
        }
    }
    // At-risk table under the axis.
    let rows = [("treated", panel.treated, TREATED), ("control", panel.control, CONTROL)];
    for (i, (name, arm, color)) in rows.iter().enumerate() {
        let y = f.bottom() + 58.0 + i as f64 * 14.0;
        c.text(f.left - 8.0, y, 10.0, "end", name);
        for &t in &xt {
            let n = arm.map_or(0, |a| a.at_risk(t));
            writeln!(
                c.out,
                "<text x=\"{:.2}\" y=\"{y:.2}\" font-size=\"10\" text-anchor=\"middle\" fill=\"{color}\" {FONT}>{n}</text>",
                f.x(t)
            )
            .unwrap();
        }
    }
}

/// Kaplan-Meier curves per arm for Good and Bad responders.
pub fn survival_by_class(audit: &SubgroupAudit) -> String {
    let mut c = Canvas::new("Survival by responder class");
    let good = audit.class(ResponderClass::Good);
    let bad = audit.class(ResponderClass::Bad);
    let tmax = [good, bad]
        .iter()
        .flat_map(|a| [&a.treated, &a.control])
        .flatten()
        .map(|a| a.km.last_time)
        .fold(1.0, f64::max);
    let panel = |i: f64| Frame {
        left: 70.0 + i * 340.0,
        top: 50.0,
        width: 280.0,
        height: HEIGHT - 170.0,
        x0: 0.0,
        x1: tmax,
        y0: 0.0,
        y1: 1.05,
    };
    km_panel(&mut c, &Panel::of_class(good), panel(0.0), tmax);
    km_panel(&mut c, &Panel::of_class(bad), panel(1.0), tmax);
    c.legend(
        WIDTH - 150.0,
        HEIGHT - 30.0,
        &[("treated", TREATED, ""), ("control", CONTROL, " stroke-dasharray=\"6 3\"")],
    );
    c.finish()
}

/// Kaplan-Meier curves of the two arms over the whole trial.
pub fn survival_by_arm(cmp: &ArmComparison) -> String {
    let mut c = Canvas::new("Survival by arm");
    let tmax = cmp.treated.km.last_time.max(cmp.control.km.last_time).max(1.0);
    let f = Frame {
        left: 90.0,
        top: 50.0,
        width: WIDTH - 240.0,
        height: HEIGHT - 170.0,
        x0: 0.0,
        x1: tmax,
        y0: 0.0,
        y1: 1.05,
    };
    let panel = Panel {
        title: "All patients".into(),
        treated: Some(&cmp.treated),
        control: Some(&cmp.control),
        log_rank: cmp.log_rank.as_ref(),
    };
    km_panel(&mut c, &panel, f, tmax);
    c.legend(
        f.left + f.width + 20.0,
        f.top + 10.0,
        &[("treated", TREATED, ""), ("control", CONTROL, " stroke-dasharray=\"6 3\"")],
    );
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_values_are_round() {
        assert_eq!(ticks(0.0, 1.0, 5), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(ticks(0.0, 37.0, 6), vec![0.0, 10.0, 20.0, 30.0]);
        assert_eq!(label(0.6000000000000001), "0.6");
        assert_eq!(label(-1.0), "-1");
    }

    #[test]
    fn text_is_escaped() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }

    #[test]
    fn empty_curve_set_renders() {
        let svg = success_by_rho(&[], "none");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(!svg.contains("href"));
    }
}
