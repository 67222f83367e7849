//! Output writers: CSV with 9 significant digits, SVG area plots, run manifests.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use flexcoop::flexarea::Vertex;
use flexcoop::net_model::OperatingPoint;

/// Formats `x` rounded to 9 significant digits in the shortest form.
pub fn num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    rounded.to_string()
}

/// Output file naming: `<prefix>_<name>`. A prefix ending in a path
/// separator is a directory and files go inside it unprefixed.
#[derive(Debug, Clone)]
pub struct OutPaths {
    prefix: String,
    pub written: Vec<PathBuf>,
}

impl OutPaths {
    pub fn new(prefix: &str) -> io::Result<Self> {
        let dir = if prefix.ends_with('/') || prefix.ends_with(std::path::MAIN_SEPARATOR) {
            Some(Path::new(prefix))
        } else {
            Path::new(prefix).parent()
        };
        if let Some(d) = dir.filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d)?;
        }
        Ok(OutPaths {
            prefix: prefix.to_string(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        if self.prefix.ends_with('/') || self.prefix.ends_with(std::path::MAIN_SEPARATOR) {
            PathBuf::from(format!("{}{name}", self.prefix))
        } else {
            PathBuf::from(format!("{}_{name}", self.prefix))
        }
    }

    /// Writes a CSV file from a header and string rows.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<PathBuf> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn text(&mut self, name: &str, content: &str) -> io::Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, content)?;
        self.written.push(path.clone());
        Ok(path)
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub case: String,
    pub case_fingerprint: String,
    pub subcommand: String,
    /// Full argument list that reproduces this run.
    pub args: Vec<String>,
    pub parameters: serde_json::Value,
    pub seeds: Vec<u64>,
    pub duration_s: f64,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn finish(mut self, out: &mut OutPaths, elapsed: Duration) -> io::Result<PathBuf> {
        self.duration_s = elapsed.as_secs_f64();
        self.outputs = out.written.iter().map(|p| p.display().to_string()).collect();
        let text = serde_json::to_string_pretty(&self).map_err(io::Error::other)?;
        out.text("manifest.json", &text)
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn nice_step(span: f64) -> f64 {
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let m = raw / mag;
    mag * if m < 1.5 {
        1.0
    } else if m < 3.5 {
        2.0
    } else if m < 7.5 {
        5.0
    } else {
        10.0
    }
}

/// Polygon plot of labelled rings in the P-Q plane.
pub fn area_svg(rings: &[(String, Vec<Vertex>)], initial: OperatingPoint) -> String {
    let (w, h, m) = (640.0, 560.0, 70.0);
    let mut lo = (initial.p, initial.q);
    let mut hi = lo;
    for v in rings.iter().flat_map(|(_, r)| r) {
        lo = (lo.0.min(v.p), lo.1.min(v.q));
        hi = (hi.0.max(v.p), hi.1.max(v.q));
    }
    let pad = 0.05 * (hi.0 - lo.0).max(hi.1 - lo.1).max(0.1);
    lo = (lo.0 - pad, lo.1 - pad);
    hi = (hi.0 + pad, hi.1 + pad);
    let sx = |p: f64| m + (p - lo.0) / (hi.0 - lo.0) * (w - 1.5 * m);
    let sy = |q: f64| h - m - (q - lo.1) / (hi.1 - lo.1) * (h - 1.5 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let (x0, x1, y0, y1) = (sx(lo.0), sx(hi.0), sy(lo.1), sy(hi.1));
    s += &format!("<rect x=\"{x0:.2}\" y=\"{y1:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>\n", x1 - x0, y0 - y1);
    for (axis, (a, b)) in [(0, (lo.0, hi.0)), (1, (lo.1, hi.1))] {
        let step = nice_step(b - a);
        let mut t = (a / step).ceil() * step;
        while t <= b {
            let label = num((t / step).round() * step);
            if axis == 0 {
                let x = sx(t);
                s += &format!("<line x1=\"{x:.2}\" y1=\"{y0:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n", y0 + 5.0);
                s += &format!("<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{label}</text>\n", y0 + 18.0);
            } else {
                let y = sy(t);
                s += &format!("<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{x0:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\n", x0 - 5.0);
                s += &format!("<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{label}</text>\n", x0 - 8.0, y + 4.0);
            }
            t += step;
        }
    }
    s += &format!("<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">P_ref (MW)</text>\n", (x0 + x1) / 2.0, h - 20.0);
    s += &format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">Q_ref (MVAr)</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, (label, ring)) in rings.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ring.iter().map(|v| format!("{:.2},{:.2}", sx(v.p), sy(v.q))).collect();
        s += &format!(
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.12\" stroke=\"{color}\" stroke-width=\"1.5\"><title>{label}</title></polygon>\n",
            pts.join(" ")
        );
        s += &format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{color}\">{label}</text>\n",
            x1 - 110.0,
            y1 + 16.0 + 14.0 * k as f64
        );
    }
    s += &format!(
        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"black\"><title>initial point</title></circle>\n",
        sx(initial.p),
        sy(initial.q)
    );
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(num(0.0), "0");
        assert_eq!(num(1.0), "1");
        assert_eq!(num(std::f64::consts::PI), "3.14159265");
        assert_eq!(num(-123456.7891234), "-123456.789");
        assert_eq!(num(1.5e-7), "0.00000015");
        assert_eq!(num(0.1 + 0.2), "0.3");
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(nice_step(6.0), 1.0);
        assert_eq!(nice_step(0.6), 0.1);
        assert_eq!(nice_step(14.0), 2.0);
    }

    #[test]
    fn svg_marks_initial_point() {
        let v = |p, q| Vertex { theta_deg: 0.0, p, q };
        let ring = vec![v(0.0, 0.0), v(1.0, 0.0), v(1.0, 1.0), v(0.0, 0.0)];
        let svg = area_svg(&[("{A}".into(), ring)], OperatingPoint::new(0.5, 0.3));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polygon") && svg.contains("<circle") && svg.contains("P_ref (MW)"));
    }
}
