//! CSV tables and hand-written SVG figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use difftraj::io::write_atomic;
use difftraj::metrics::CosineMatrix;
use difftraj::Attribute;

use crate::pipeline::Evaluation;
use crate::CliError;

const PALETTE: [&str; 4] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];

fn color(a: Attribute) -> &'static str {
    PALETTE[a.index()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Diverging blue-white-red for a value in [-1, 1].
fn heat(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

pub fn cosine_heatmap_svg(m: &CosineMatrix, title: &str) -> String {
    let cell = 48.0;
    let left = 60.0;
    let top = 50.0;
    let k = m.grid.len() as f64;
    let w = left + cell * k + 20.0;
    let h = top + cell * k + 40.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<text x=\"{left}\" y=\"24\" font-size=\"14\">{}</text>", esc(title));
    for (i, ti) in m.grid.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{ti}</text>", left - 6.0, y + cell / 2.0 + 4.0);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{ti}</text>",
            left + cell * i as f64 + cell / 2.0,
            top + cell * k + 16.0
        );
        for j in 0..m.grid.len() {
            let x = left + cell * j as f64;
            let (fill, label) = match m.values[i][j] {
                Some(v) => (heat(v), format!("{v:.2}")),
                None => ("#cccccc".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"#ffffff\"/>"
            );
            let _ = writeln!(
                s,
                "<text class=\"cell-value\" x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(1e-12);
        self.left + (x - self.x.0) / span * self.width
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(1e-12);
        self.top + self.height - (y - self.y.0) / span * self.height
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(s, "<rect x=\"{l}\" y=\"{t}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#444444\"/>");
        for k in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * k as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{fx:.3}</text>", self.px(fx), t + h + 16.0);
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{fy:.3}</text>", l - 6.0, self.py(fy) + 4.0);
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", l + w / 2.0, t + h + 34.0, esc(xlabel));
        let _ = writeln!(
            s,
            "<text transform=\"translate(14,{:.1}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
            t + h / 2.0,
            esc(ylabel)
        );
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn legend(s: &mut String, x: f64, y: f64, items: &[(String, &str)]) {
    for (k, (name, col)) in items.iter().enumerate() {
        let yy = y + 16.0 * k as f64;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{col}\"/>", yy - 9.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{yy}\">{}</text>", x + 14.0, esc(name));
    }
}

pub fn distance_chart_svg(eval: &Evaluation) -> String {
    let xs = eval.attributes.iter().flat_map(|a| a.mean_distance.iter().map(|(t, _)| *t as f64));
    let ys = eval.attributes.iter().flat_map(|a| a.mean_distance.iter().map(|(_, d)| *d));
    let f = Frame {
        left: 70.0,
        top: 40.0,
        width: 420.0,
        height: 260.0,
        x: bounds(xs),
        y: bounds(ys.chain(std::iter::once(0.0))),
    };
    let mut s = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"620\" height=\"360\" font-family=\"sans-serif\" font-size=\"11\">\n",
    );
    s.push_str("<text x=\"70\" y=\"24\" font-size=\"14\">feature_perceptual_distance to neutral vs swap step</text>\n");
    f.axes(&mut s, "swap step tau", "mean distance");
    for a in &eval.attributes {
        let pts: Vec<String> = a
            .mean_distance
            .iter()
            .map(|(t, d)| format!("{:.2},{:.2}", f.px(*t as f64), f.py(*d)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            color(a.attribute),
            pts.join(" ")
        );
        for (t, d) in &a.mean_distance {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
                f.px(*t as f64),
                f.py(*d),
                color(a.attribute)
            );
        }
    }
    let items: Vec<(String, &str)> = eval.attributes.iter().map(|a| (a.attribute.to_string(), color(a.attribute))).collect();
    legend(&mut s, 510.0, 60.0, &items);
    s.push_str("</svg>\n");
    s
}

pub fn pca_scatter_svg(eval: &Evaluation) -> String {
    let coords = &eval.pca.projection.coords;
    let f = Frame {
        left: 70.0,
        top: 40.0,
        width: 380.0,
        height: 320.0,
        x: bounds(coords.iter().map(|c| c[0])),
        y: bounds(coords.iter().map(|c| c[1])),
    };
    let mut s = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"420\" font-family=\"sans-serif\" font-size=\"11\">\n",
    );
    let _ = writeln!(
        s,
        "<text x=\"70\" y=\"24\" font-size=\"14\">PCA of generated latents, noise seed {}</text>",
        eval.pca.noise_seed
    );
    f.axes(&mut s, "PC1", "PC2");
    let origin = &coords[0];
    for a in &eval.attributes {
        let mut pts = vec![format!("{:.2},{:.2}", f.px(origin[0]), f.py(origin[1]))];
        for (c, (lab, _)) in coords.iter().zip(&eval.pca.labels) {
            if *lab == Some(a.attribute) {
                pts.push(format!("{:.2},{:.2}", f.px(c[0]), f.py(c[1])));
            }
        }
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            color(a.attribute),
            pts.join(" ")
        );
    }
    for (c, (lab, _)) in coords.iter().zip(&eval.pca.labels) {
        let col = lab.map_or("#000000", color);
        let r = if lab.is_none() { 5 } else { 3 };
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r}\" fill=\"{col}\"/>", f.px(c[0]), f.py(c[1]));
    }
    let mut items: Vec<(String, &str)> = vec![("neutral".to_string(), "#000000")];
    items.extend(eval.attributes.iter().map(|a| (a.attribute.to_string(), color(a.attribute))));
    legend(&mut s, 470.0, 60.0, &items);
    s.push_str("</svg>\n");
    s
}

pub fn cfrt_csv(eval: &Evaluation) -> String {
    let mut s = String::from("attribute,cfrt,cfrt_interpolated,closer_at_small_tau,mean_spearman,undefined_correlations\n");
    for a in &eval.attributes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            a.attribute, a.cfrt.score, a.cfrt_interpolated.score, a.closer_at_small_tau, a.mean_spearman, a.undefined_correlations
        );
    }
    s
}

pub fn distance_csv(eval: &Evaluation) -> String {
    let mut s = String::from("attribute,tau,mean_feature_perceptual_distance\n");
    for a in &eval.attributes {
        for (t, d) in &a.mean_distance {
            let _ = writeln!(s, "{},{t},{d}", a.attribute);
        }
    }
    s
}

pub fn perceptual_csv(eval: &Evaluation) -> String {
    let mut s = String::from("attribute,trajectory,noise_seed,tau,feature_perceptual_distance,style_prob\n");
    for a in &eval.attributes {
        for (i, r) in a.perceptual.iter().enumerate() {
            for e in &r.entries {
                let _ = writeln!(
                    s,
                    "{},{i},{},{},{},{}",
                    a.attribute,
                    eval.seeds[i],
                    e.position,
                    e.distance,
                    e.style_prob
                );
            }
        }
    }
    s
}

pub fn pca_csv(eval: &Evaluation) -> String {
    let mut s = String::from("attribute,tau,pc1,pc2\n");
    for (c, (lab, tau)) in eval.pca.projection.coords.iter().zip(&eval.pca.labels) {
        let name = lab.map_or_else(|| "neutral".to_string(), |a| a.to_string());
        let _ = writeln!(s, "{name},{tau},{},{}", c[0], c[1]);
    }
    s
}

fn write_files(out_dir: &Path, files: Vec<(String, String)>) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut paths = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = out_dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

fn tables(eval: &Evaluation) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = vec![
        ("cfrt.csv".into(), cfrt_csv(eval)),
        ("distance_vs_tau.csv".into(), distance_csv(eval)),
        ("perceptual.csv".into(), perceptual_csv(eval)),
        ("pca.csv".into(), pca_csv(eval)),
    ];
    for a in &eval.attributes {
        files.push((format!("cosine_{}.csv", a.attribute), a.mean_cosine.to_csv()));
        files.push((format!("cfrt_{}.csv", a.attribute), a.cfrt.to_csv()));
        files.push((format!("cfrt_interpolated_{}.csv", a.attribute), a.cfrt_interpolated.to_csv()));
    }
    files
}

fn check(eval: &Evaluation) -> Result<(), CliError> {
    if eval.attributes.is_empty() {
        return Err(CliError::Data("report: no attribute evaluations to emit".into()));
    }
    Ok(())
}

/// CSV tables only.
pub fn emit_tables(eval: &Evaluation, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    check(eval)?;
    write_files(out_dir, tables(eval))
}

/// Writes every table and figure for `eval` into `out_dir`; returns the paths.
pub fn emit_report(eval: &Evaluation, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    check(eval)?;
    let mut files = tables(eval);
    files.push(("distance_vs_tau.svg".into(), distance_chart_svg(eval)));
    files.push(("pca_scatter.svg".into(), pca_scatter_svg(eval)));
    for a in &eval.attributes {
        files.push((
            format!("cosine_{}.svg", a.attribute),
            cosine_heatmap_svg(&a.mean_cosine, &format!("mean direction cosine, {}", a.attribute)),
        ));
    }
    write_files(out_dir, files)
}
