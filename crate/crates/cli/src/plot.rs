//! SVG lap trace and speed profile from a trajectory CSV.

use std::fmt::Write;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub infraction: bool,
}

pub fn parse(text: &str) -> Result<Vec<Sample>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty log")?.split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .with_context(|| format!("log has no {name} column"))
    };
    let (ct, cx, cy, cv, ci) = (col("t")?, col("x")?, col("y")?, col("v")?, col("infraction")?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            bail!("line {}: expected {} fields, got {}", n + 2, header.len(), f.len());
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .with_context(|| format!("line {}: bad number {:?} in {}", n + 2, f[i], header[i]))
        };
        out.push(Sample {
            t: num(ct)?,
            x: num(cx)?,
            y: num(cy)?,
            v: num(cv)?,
            infraction: !f[ci].is_empty(),
        });
    }
    if out.is_empty() {
        bail!("log has no samples");
    }
    Ok(out)
}

const W: f64 = 640.0;
const TRACE_H: f64 = 480.0;
const SPEED_H: f64 = 200.0;
const PAD: f64 = 30.0;

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, lo + 1.0)
    }
}

fn polyline(out: &mut String, pts: impl Iterator<Item = (f64, f64)>, color: &str) {
    out.push_str("<polyline fill=\"none\" stroke=\"");
    out.push_str(color);
    out.push_str("\" stroke-width=\"1.5\" points=\"");
    for (x, y) in pts {
        let _ = write!(out, "{x:.2},{y:.2} ");
    }
    out.push_str("\"/>\n");
}

pub fn render(samples: &[Sample]) -> String {
    let mut s = String::new();
    let total_h = TRACE_H + SPEED_H + 3.0 * PAD;
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{total_h}\" viewBox=\"0 0 {W} {total_h}\">"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // lap trace, equal axis scale
    let (x0, x1) = bounds(samples.iter().map(|p| p.x));
    let (y0, y1) = bounds(samples.iter().map(|p| p.y));
    let scale = ((W - 2.0 * PAD) / (x1 - x0)).min((TRACE_H - PAD) / (y1 - y0));
    let tx = |x: f64| PAD + (x - x0) * scale;
    let ty = |y: f64| PAD + (y1 - y) * scale;
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"20\" font-size=\"14\">lap trace</text>");
    polyline(&mut s, samples.iter().map(|p| (tx(p.x), ty(p.y))), "steelblue");
    for p in samples.iter().filter(|p| p.infraction) {
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"crimson\"/>", tx(p.x), ty(p.y));
    }

    // speed profile
    let top = TRACE_H + 2.0 * PAD;
    let (t0, t1) = bounds(samples.iter().map(|p| p.t));
    let (_, vmax) = bounds(samples.iter().map(|p| p.v));
    let vmax = vmax.max(1.0);
    let sx = |t: f64| PAD + (t - t0) / (t1 - t0) * (W - 2.0 * PAD);
    let sy = |v: f64| top + SPEED_H - v / vmax * SPEED_H;
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{:.0}\" font-size=\"14\">speed (max {:.1} m/s) over {:.1} s</text>",
        top - 8.0,
        vmax,
        t1 - t0
    );
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"gray\"/>",
        top + SPEED_H,
        W - PAD
    );
    polyline(&mut s, samples.iter().map(|p| (sx(p.t), sy(p.v))), "darkorange");
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOG: &str = "t,x,y,psi,v,delta,steering,acceleration,segment,infraction\n\
                       0,0,0,0,0,0,0,1,0,\n\
                       0.05,0.1,0,0,2,0,0,1,0,\n\
                       0.1,0.3,0.1,0,4,0,0,1,0,off_track\n";

    #[test]
    fn parses_and_flags_infractions() {
        let s = parse(LOG).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2].v, 4.0);
        assert!(s[2].infraction && !s[1].infraction);
    }

    #[test]
    fn rejects_bad_logs() {
        assert!(parse("").is_err());
        assert!(parse("t,x\n").is_err());
        assert!(parse("t,x,y,v,infraction\n0,a,0,0,\n").is_err());
    }

    #[test]
    fn svg_has_both_panels() {
        let svg = render(&parse(LOG).unwrap());
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
