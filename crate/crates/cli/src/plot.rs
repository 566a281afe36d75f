//! Standalone SVG charts from the CSV files the other subcommands write.
//!
//! The chart type follows from the CSV header: per-token TRP bars, bAcc by
//! context size, per-turn attribution box plots or turn-length histograms.

use std::collections::BTreeMap;
use std::fmt::Write;

use anyhow::{anyhow, bail, Result};
use turnlab::eval::EVAL_CSV_HEADER;
use turnlab::inspect::ATTRIBUTION_CSV_HEADER;
use turnlab::project::HISTOGRAM_CSV_HEADER;

use crate::commands::TRP_CSV_HEADER;
use crate::manifest::version_stamp;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 90.0;
const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    body: String,
    y_lo: f64,
    y_hi: f64,
}

impl Svg {
    fn new(title: &str, y_label: &str, y_lo: f64, y_hi: f64) -> Self {
        let mut s = Svg { body: String::new(), y_lo, y_hi };
        let _ = write!(s.body, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
        let _ = write!(
            s.body,
            r#"<text x="16" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + Self::plot_h() / 2.0,
            TOP + Self::plot_h() / 2.0,
            esc(y_label)
        );
        for i in 0..=4 {
            let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
            let y = s.y(v);
            let _ = write!(s.body, r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, W - RIGHT);
            let _ = write!(s.body, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#, LEFT - 6.0, y + 4.0, tick(v));
        }
        let _ = write!(
            s.body,
            r#"<polyline points="{LEFT:.1},{TOP:.1} {LEFT:.1},{:.1} {:.1},{:.1}" fill="none" stroke="black"/>"#,
            TOP + Self::plot_h(),
            W - RIGHT,
            TOP + Self::plot_h()
        );
        s
    }

    fn plot_w() -> f64 {
        W - LEFT - RIGHT
    }

    fn plot_h() -> f64 {
        H - TOP - BOTTOM
    }

    fn y(&self, v: f64) -> f64 {
        let span = if self.y_hi > self.y_lo { self.y_hi - self.y_lo } else { 1.0 };
        TOP + Self::plot_h() * (1.0 - (v.clamp(self.y_lo, self.y_hi) - self.y_lo) / span)
    }

    /// Center of slot `i` of `n` equal slots along the x axis.
    fn slot(i: usize, n: usize) -> f64 {
        LEFT + Self::plot_w() * (i as f64 + 0.5) / n as f64
    }

    fn x_label(&mut self, x: f64, label: &str, rotate: bool) {
        let y = TOP + Self::plot_h() + 16.0;
        if rotate {
            let _ = write!(self.body, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="end" font-size="10" transform="rotate(-60 {x:.1} {y:.1})">{}</text>"#, esc(label));
        } else {
            let _ = write!(self.body, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="middle" font-size="11">{}</text>"#, esc(label));
        }
    }

    fn bar(&mut self, cx: f64, width: f64, v: f64, color: &str) {
        let (top, base) = (self.y(v), self.y(self.y_lo.max(0.0)));
        let _ = write!(
            self.body,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
            cx - width / 2.0,
            top.min(base),
            width,
            (base - top).abs()
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (name, color)) in entries.iter().enumerate() {
            let y = TOP + 14.0 * i as f64 + 6.0;
            let x = W - RIGHT - 150.0;
            let _ = write!(self.body, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
            let _ = write!(self.body, r#"<text x="{:.1}" y="{y:.1}" font-size="11">{}</text>"#, x + 14.0, esc(name));
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n<!-- {} -->\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}\n</svg>\n",
            version_stamp(),
            self.body
        )
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn num(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| anyhow!("not a number: {s:?}"))
}

fn records(text: &str) -> Result<(String, Vec<csv::StringRecord>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map(|h| h.iter().collect::<Vec<_>>().join(",")).unwrap_or_default();
    let rows = r.records().collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        bail!("no rows");
    }
    Ok((header, rows))
}

/// Renders the CSV `text` as an SVG document.
pub fn render(text: &str) -> Result<String> {
    let (header, rows) = records(text)?;
    match header.as_str() {
        h if h == TRP_CSV_HEADER => trp_bars(&rows),
        h if h == EVAL_CSV_HEADER => eval_chart(&rows),
        h if h == ATTRIBUTION_CSV_HEADER => attribution_boxes(&rows),
        h if h == HISTOGRAM_CSV_HEADER => histogram(&rows),
        h => bail!("unrecognized CSV header {h:?}"),
    }
}

/// TRP of every token of the first dialog in the file; true shifts highlighted.
fn trp_bars(rows: &[csv::StringRecord]) -> Result<String> {
    let id = &rows[0][0];
    let rows: Vec<_> = rows.iter().filter(|r| &r[0] == id).collect();
    let mut svg = Svg::new(&format!("TRP per token: {id}"), "TRP", 0.0, 1.0);
    let n = rows.len();
    let width = (Svg::plot_w() / n as f64 * 0.8).max(1.0);
    for (i, r) in rows.iter().enumerate() {
        let color = if &r[4] == "1" { COLORS[3] } else { COLORS[0] };
        svg.bar(Svg::slot(i, n), width, num(&r[3])?, color);
        svg.x_label(Svg::slot(i, n), &r[2], true);
    }
    svg.legend(&[("next token opens a turn".into(), COLORS[3]), ("otherwise".into(), COLORS[0])]);
    Ok(svg.finish())
}

/// bAcc against context size per model, or a bar per model without `k`.
fn eval_chart(rows: &[csv::StringRecord]) -> Result<String> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let with_k = rows.iter().any(|r| !r[3].is_empty());
    for r in rows {
        let name = format!("{} ({})", &r[0], &r[8]);
        let x = if with_k { num(&r[3])? } else { 0.0 };
        series.entry(name).or_default().push((x, num(&r[5])?));
    }
    let lo = series.values().flatten().map(|p| p.1).fold(1.0, f64::min).min(0.5);
    let mut svg = Svg::new(if with_k { "bAcc by context turns" } else { "bAcc by model" }, "bAcc", (lo * 10.0).floor() / 10.0, 1.0);
    let legend: Vec<(String, &str)> = series.keys().enumerate().map(|(i, k)| (k.clone(), COLORS[i % COLORS.len()])).collect();
    if with_k {
        let ks: Vec<f64> = {
            let mut ks: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
            ks.sort_by(f64::total_cmp);
            ks.dedup();
            ks
        };
        let pos = |k: f64| Svg::slot(ks.iter().position(|&x| x == k).unwrap_or(0), ks.len());
        for &k in &ks {
            svg.x_label(pos(k), &format!("k={k}"), false);
        }
        for (i, pts) in series.values().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut pts = pts.clone();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let line: Vec<String> = pts.iter().map(|&(k, v)| format!("{:.1},{:.1}", pos(k), svg.y(v))).collect();
            let _ = write!(svg.body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
            for &(k, v) in &pts {
                let _ = write!(svg.body, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, pos(k), svg.y(v));
            }
        }
    } else {
        let n = series.len();
        for (i, (name, pts)) in series.iter().enumerate() {
            svg.bar(Svg::slot(i, n), Svg::plot_w() / n as f64 * 0.6, pts[0].1, COLORS[i % COLORS.len()]);
            svg.x_label(Svg::slot(i, n), name, false);
        }
    }
    svg.legend(&legend);
    Ok(svg.finish())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    match sorted.get(i + 1) {
        Some(&next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

/// Box plot (min, quartiles, max) per turn offset, one box per kind.
fn attribution_boxes(rows: &[csv::StringRecord]) -> Result<String> {
    let mut groups: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let offset: i64 = r[1].trim().parse().map_err(|_| anyhow!("bad turn offset {:?}", &r[1]))?;
        groups.entry((r[3].to_string(), offset)).or_default().push(num(&r[2])?);
    }
    let kinds: Vec<String> = {
        let mut k: Vec<String> = groups.keys().map(|(k, _)| k.clone()).collect();
        k.dedup();
        k
    };
    let mut offsets: Vec<i64> = groups.keys().map(|(_, o)| *o).collect();
    offsets.sort_unstable_by(|a, b| b.cmp(a));
    offsets.dedup();
    let all = groups.values().flatten();
    let lo = all.clone().copied().fold(0.0, f64::min);
    let hi = all.copied().fold(0.0, f64::max).max(lo + 1e-12);
    let mut svg = Svg::new("Attribution per turn (t, t-1, ...)", "value", lo, hi);
    let width = Svg::plot_w() / offsets.len() as f64 / (kinds.len() as f64 + 1.0);
    for (oi, &o) in offsets.iter().enumerate() {
        let center = Svg::slot(oi, offsets.len());
        svg.x_label(center, &if o == 0 { "t".to_string() } else { format!("t{o}") }, false);
        for (ki, kind) in kinds.iter().enumerate() {
            let Some(vals) = groups.get(&(kind.clone(), o)) else { continue };
            let mut v = vals.clone();
            v.sort_by(f64::total_cmp);
            let cx = center + (ki as f64 - (kinds.len() as f64 - 1.0) / 2.0) * width;
            let color = COLORS[ki % COLORS.len()];
            let [mn, q1, med, q3, mx] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| svg.y(quantile(&v, q)));
            let half = width * 0.4;
            let _ = write!(svg.body, r#"<line x1="{cx:.1}" y1="{mn:.1}" x2="{cx:.1}" y2="{mx:.1}" stroke="{color}"/>"#);
            let _ = write!(
                svg.body,
                r#"<rect x="{:.1}" y="{q3:.1}" width="{:.1}" height="{:.1}" fill="white" stroke="{color}" stroke-width="1.5"/>"#,
                cx - half,
                2.0 * half,
                (q1 - q3).max(0.5)
            );
            let _ = write!(svg.body, r#"<line x1="{:.1}" y1="{med:.1}" x2="{:.1}" y2="{med:.1}" stroke="{color}" stroke-width="2"/>"#, cx - half, cx + half);
        }
    }
    let legend: Vec<(String, &str)> = kinds.iter().enumerate().map(|(i, k)| (k.clone(), COLORS[i % COLORS.len()])).collect();
    svg.legend(&legend);
    Ok(svg.finish())
}

/// Rollout counts per turn length, summed over prefixes; the censored bucket
/// is drawn in its own color.
fn histogram(rows: &[csv::StringRecord]) -> Result<String> {
    let mut buckets: Vec<(String, f64)> = Vec::new();
    for r in rows {
        let c = num(&r[2])?;
        match buckets.iter_mut().find(|(b, _)| b == &r[1]) {
            Some(e) => e.1 += c,
            None => buckets.push((r[1].to_string(), c)),
        }
    }
    let prefixes: std::collections::BTreeSet<&str> = rows.iter().map(|r| &r[0]).collect();
    let hi = buckets.iter().map(|b| b.1).fold(1.0, f64::max);
    let mut svg = Svg::new(&format!("Tokens until the next turn ({} prefixes)", prefixes.len()), "rollouts", 0.0, hi);
    let n = buckets.len();
    let every = n.div_ceil(25).max(1);
    for (i, (b, c)) in buckets.iter().enumerate() {
        let color = if b.starts_with(">=") { COLORS[3] } else { COLORS[0] };
        svg.bar(Svg::slot(i, n), Svg::plot_w() / n as f64 * 0.8, *c, color);
        if i % every == 0 || b.starts_with(">=") {
            svg.x_label(Svg::slot(i, n), b, false);
        }
    }
    Ok(svg.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_csv_has_no_rows() {
        for text in ["", "model,train_set,test_set,k,threshold,bacc,tpr,tnr,tune_on,tp,fp,tn,fn\n"] {
            assert_eq!(render(text).unwrap_err().to_string(), "no rows");
        }
    }

    #[test]
    fn unknown_header_rejected() {
        assert!(render("a,b\n1,2\n").unwrap_err().to_string().contains("unrecognized"));
    }

    #[test]
    fn each_schema_renders() {
        let eval = format!("{EVAL_CSV_HEADER}\nlm,train,test,0,0.5,0.7,0.6,0.8,valid,1,2,3,4\nlm,train,test,1,0.5,0.8,0.7,0.9,valid,1,2,3,4\n");
        let att = format!("{ATTRIBUTION_CSV_HEADER}\nd:1,0,0.7,attention\nd:1,-1,0.3,attention\nd:2,0,0.5,attention\nd:2,-1,0.5,attention\n");
        let hist = format!("{HISTOGRAM_CSV_HEADER}\np,0,3\np,1,5\np,>=2,1\n");
        let trp = format!("{TRP_CSV_HEADER}\nd/lm,0,<s1>,0.1,0\nd/lm,1,hi</w>,0.9,1\n");
        for text in [eval, att, hist, trp] {
            let svg = render(&text).unwrap();
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(svg.contains(&version_stamp()));
            assert_eq!(svg, render(&text).unwrap());
        }
    }

    #[test]
    fn labels_are_escaped() {
        let trp = format!("{TRP_CSV_HEADER}\nd,0,<s1>,0.1,0\n");
        let svg = render(&trp).unwrap();
        assert!(svg.contains("&lt;s1&gt;") && !svg.contains("<s1>"));
    }

    #[test]
    fn quartiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&[2.0], 0.75), 2.0);
    }
}
