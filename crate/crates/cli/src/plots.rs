//! Raster renderings of the report tables. Images carry no text; the file
//! name says what is shown and the CSV holds the numbers.

use image::{Rgb, RgbImage};

use crate::Failure;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

type Table = (Vec<String>, Vec<Vec<String>>);

fn parse(text: &str) -> Result<Table, Failure> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Failure::runtime("empty table"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

fn num(s: &str) -> Result<f64, Failure> {
    s.trim()
        .parse()
        .map_err(|_| Failure::runtime(format!("`{s}` is not a number")))
}

fn col(header: &[String], name: &str) -> Result<usize, Failure> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Failure::runtime(format!("missing column `{name}`")))
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> Rgb<u8> {
    let c = |i: usize| ((a[i] + (b[i] - a[i]) * t) * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Perceptual sequential map on `[0, 1]`.
pub fn viridis(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.229, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    lerp(STOPS[i], STOPS[i + 1], x - i as f64)
}

/// Blue–white–red on `[-1, 1]`.
pub fn diverging(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    if v < 0.0 {
        lerp([1.0, 1.0, 1.0], [0.13, 0.4, 0.67], -v)
    } else {
        lerp([1.0, 1.0, 1.0], [0.7, 0.09, 0.17], v)
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Vertical bars; `groups[i]` is a cluster of `(value, colour index)`.
/// Values are scaled so `top` reaches the panel height.
fn bar_panel(groups: &[Vec<(f64, usize)>], top: f64) -> RgbImage {
    const BAR: u32 = 12;
    const GAP: u32 = 10;
    const H: u32 = 200;
    const PAD: u32 = 8;
    let width: u32 = groups.iter().map(|g| g.len() as u32 * BAR + GAP).sum::<u32>() + 2 * PAD;
    let mut img = RgbImage::from_pixel(width.max(2 * PAD + 1), H + 2 * PAD, BG);
    let top = if top > 0.0 { top } else { 1.0 };
    let mut x = PAD + GAP / 2;
    for g in groups {
        for &(v, c) in g {
            let h = ((v / top).clamp(0.0, 1.0) * H as f64).round() as u32;
            fill(&mut img, x, PAD + H - h, BAR - 1, h, Rgb(PALETTE[c % PALETTE.len()]));
            x += BAR;
        }
        x += GAP;
    }
    let w = img.width();
    fill(&mut img, PAD, PAD + H, w - 2 * PAD, 1, AXIS);
    img
}

fn stack(panels: Vec<RgbImage>) -> RgbImage {
    let w = panels.iter().map(|p| p.width()).max().unwrap_or(1);
    let h = panels.iter().map(|p| p.height()).sum::<u32>().max(1);
    let mut img = RgbImage::from_pixel(w, h, BG);
    let mut y = 0;
    for p in panels {
        image::imageops::replace(&mut img, &p, 0, y as i64);
        y += p.height();
    }
    img
}

fn density(text: &str) -> Result<RgbImage, Failure> {
    const CELL: u32 = 8;
    let (h, rows) = parse(text)?;
    let (xi, yi, di) = (col(&h, "x")?, col(&h, "y")?, col(&h, "density")?);
    let mut xs: Vec<f64> = Vec::new();
    let mut pts = Vec::with_capacity(rows.len());
    for r in &rows {
        let (x, y, d) = (num(&r[xi])?, num(&r[yi])?, num(&r[di])?);
        if !xs.contains(&x) {
            xs.push(x);
        }
        pts.push((x, y, d));
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 || pts.len() != n * n {
        return Err(Failure::runtime("density table is not a square grid"));
    }
    let max = pts.iter().map(|p| p.2).fold(0.0, f64::max);
    let mut img = RgbImage::new(n as u32 * CELL, n as u32 * CELL);
    let index = |v: f64| xs.iter().position(|x| *x == v);
    for (x, y, d) in pts {
        let (Some(ix), Some(iy)) = (index(x), index(y)) else {
            return Err(Failure::runtime("density table is not a square grid"));
        };
        // larger y drawn higher up
        let row = (n - 1 - iy) as u32;
        let c = viridis(if max > 0.0 { d / max } else { 0.0 });
        fill(&mut img, ix as u32 * CELL, row * CELL, CELL, CELL, c);
    }
    Ok(img)
}

fn histograms(text: &str) -> Result<Vec<(String, RgbImage)>, Failure> {
    let (h, rows) = parse(text)?;
    let (si, di, pi) = (col(&h, "source")?, col(&h, "dim")?, col(&h, "probability")?);
    let mut sources: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for r in &rows {
        let d = num(&r[di])? as usize;
        let p = num(&r[pi])?;
        let idx = match sources.iter().position(|(s, _)| *s == r[si]) {
            Some(i) => i,
            None => {
                sources.push((r[si].clone(), Vec::new()));
                sources.len() - 1
            }
        };
        let dims = &mut sources[idx].1;
        if dims.len() <= d {
            dims.resize(d + 1, Vec::new());
        }
        dims[d].push(p);
    }
    Ok(sources
        .into_iter()
        .map(|(s, dims)| {
            let panels = dims
                .iter()
                .enumerate()
                .map(|(d, probs)| {
                    let top = probs.iter().cloned().fold(0.0, f64::max);
                    let groups: Vec<Vec<(f64, usize)>> = probs.iter().map(|p| vec![(*p, d)]).collect();
                    bar_panel(&groups, top)
                })
                .collect();
            let name: String = s
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
                .collect();
            (format!("histogram-{name}.png"), stack(panels))
        })
        .collect())
}

fn usage(text: &str) -> Result<RgbImage, Failure> {
    let (h, rows) = parse(text)?;
    let means: Vec<usize> = h
        .iter()
        .enumerate()
        .filter(|(_, c)| c.ends_with("_mean"))
        .map(|(i, _)| i)
        .collect();
    let groups = rows
        .iter()
        .map(|r| means.iter().enumerate().map(|(k, &i)| Ok((num(&r[i])?, k))).collect())
        .collect::<Result<Vec<_>, Failure>>()?;
    Ok(bar_panel(&groups, 1.0))
}

fn correlation(text: &str) -> Result<RgbImage, Failure> {
    const CELL: u32 = 40;
    let (h, rows) = parse(text)?;
    let k = h.len().saturating_sub(2);
    let mut img = RgbImage::from_pixel(k.max(1) as u32 * CELL, rows.len().max(1) as u32 * CELL, BG);
    for (gi, r) in rows.iter().enumerate() {
        for a in 0..k {
            let v = num(&r[1 + a])?;
            fill(
                &mut img,
                a as u32 * CELL,
                gi as u32 * CELL,
                CELL - 1,
                CELL - 1,
                diverging(v),
            );
        }
    }
    Ok(img)
}

fn divergence(text: &str) -> Result<RgbImage, Failure> {
    let (h, rows) = parse(text)?;
    let (ai, ri, ji) = (col(&h, "agent")?, col(&h, "reference")?, col(&h, "js")?);
    let mut refs: Vec<&str> = Vec::new();
    let mut groups: Vec<(String, Vec<(f64, usize)>)> = Vec::new();
    for r in &rows {
        let c = match refs.iter().position(|x| *x == r[ri]) {
            Some(i) => i,
            None => {
                refs.push(&r[ri]);
                refs.len() - 1
            }
        };
        let v = num(&r[ji])?;
        match groups.iter_mut().find(|(a, _)| *a == r[ai]) {
            Some((_, g)) => g.push((v, c)),
            None => groups.push((r[ai].clone(), vec![(v, c)])),
        }
    }
    let groups: Vec<_> = groups.into_iter().map(|(_, g)| g).collect();
    Ok(bar_panel(&groups, std::f64::consts::LN_2))
}

/// Images for one report table, by file stem. Unknown tables yield none.
pub fn render(stem: &str, text: &str) -> Result<Vec<(String, RgbImage)>, Failure> {
    let ctx = |e: Failure| Failure::runtime(format!("{stem}.csv: {e}"));
    Ok(match stem {
        s if s.starts_with("density-") => vec![(format!("{s}.png"), density(text).map_err(ctx)?)],
        "histograms" => histograms(text).map_err(ctx)?,
        "usage" => vec![("usage.png".into(), usage(text).map_err(ctx)?)],
        "correlation" => vec![("correlation.png".into(), correlation(text).map_err(ctx)?)],
        "divergence" => vec![("divergence-js.png".into(), divergence(text).map_err(ctx)?)],
        _ => Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_maps_hit_their_ends() {
        assert_eq!(viridis(0.0), Rgb([68, 1, 84]));
        assert_eq!(viridis(1.0), Rgb([253, 231, 37]));
        assert_eq!(diverging(0.0), Rgb([255, 255, 255]));
        assert_eq!(viridis(f64::NAN), viridis(0.0));
    }

    #[test]
    fn density_peak_is_brightest_and_y_points_up() {
        let mut csv = String::from("x,y,density\n");
        for y in [-0.5, 0.5] {
            for x in [-0.5, 0.5] {
                let d = if x > 0.0 && y > 0.0 { 2.0 } else { 0.5 };
                csv.push_str(&format!("{x},{y},{d}\n"));
            }
        }
        let img = density(&csv).unwrap();
        assert_eq!(img.dimensions(), (16, 16));
        // top-right cell holds (0.5, 0.5)
        assert_eq!(*img.get_pixel(12, 3), viridis(1.0));
        assert_eq!(*img.get_pixel(3, 12), viridis(0.25));
    }

    #[test]
    fn unknown_and_malformed_tables() {
        assert!(render("notes", "a,b\n1,2\n").unwrap().is_empty());
        assert!(render("density-x", "x,y,density\n0,0,1\n1,0,1\n").is_err());
        assert!(render("usage", "method,alpha,jump_mean\nm,1,abc\n").is_err());
    }

    #[test]
    fn one_histogram_image_per_source() {
        let csv = "source,dim,bin,center,probability\na,0,0,0,0.5\na,0,1,1,0.5\nb:x,0,0,0,1\nb:x,0,1,1,0\n";
        let out = render("histograms", csv).unwrap();
        let names: Vec<_> = out.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["histogram-a.png", "histogram-b-x.png"]);
    }
}
