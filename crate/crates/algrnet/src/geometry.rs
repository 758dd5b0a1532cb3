//! Muscle-region geometry: rule tables mapping landmarks to per-branch region
//! centers, and Gaussian attention maps over the feature grid.
//!
//! A rule table is a small text config (one record per branch) so the center
//! conventions stay editable rather than hard-coded. Offsets inside a formula
//! are expressed as fractions of the inter-ocular distance; learned offsets
//! from the adaptive head are added on top in feature-map units.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Detected or ground-truth landmarks in feature-map units.
#[derive(Clone, Debug, PartialEq)]
pub struct Landmarks {
    pub points: Vec<(f64, f64)>,
}

impl Landmarks {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Input("non-finite landmark coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flatten to [x0, y0, x1, y1, ...].
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Input("odd landmark coordinate count".into()));
        }
        Self::new(flat.chunks(2).map(|c| (c[0], c[1])).collect())
    }
}

/// Which task's regions a rule table (or region spec) describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionMode {
    Au,
    Palsy,
}

impl RegionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionMode::Au => "au",
            RegionMode::Palsy => "palsy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "au" => Some(RegionMode::Au),
            "palsy" => Some(RegionMode::Palsy),
            _ => None,
        }
    }
}

/// Anchor of a center formula: a single landmark or the midpoint of two.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anchor {
    Landmark(usize),
    Midpoint(usize, usize),
}

/// One center formula: anchor plus a fixed offset in inter-ocular units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterRule {
    pub anchor: Anchor,
    pub offset: (f64, f64),
}

impl CenterRule {
    fn max_index(&self) -> usize {
        match self.anchor {
            Anchor::Landmark(i) => i,
            Anchor::Midpoint(i, j) => i.max(j),
        }
    }

    /// Evaluate in feature-map units given landmarks and the IOD scale.
    pub fn eval(&self, lmk: &Landmarks, iod: f64) -> (f64, f64) {
        let (ax, ay) = match self.anchor {
            Anchor::Landmark(i) => lmk.points[i],
            Anchor::Midpoint(i, j) => {
                let (x1, y1) = lmk.points[i];
                let (x2, y2) = lmk.points[j];
                ((x1 + x2) * 0.5, (y1 + y2) * 0.5)
            }
        };
        (ax + self.offset.0 * iod, ay + self.offset.1 * iod)
    }
}

/// One branch record of the rule table.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchRule {
    pub name: String,
    pub centers: [CenterRule; 2],
    pub default_scale: f64,
    pub mode: RegionMode,
}

/// Parsed rule table: per-branch center formulas plus the landmark pair that
/// defines the inter-ocular unit.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleTable {
    pub landmark_count: usize,
    pub iod_pair: (usize, usize),
    pub branches: Vec<BranchRule>,
}

impl RuleTable {
    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn mode(&self) -> RegionMode {
        self.branches
            .first()
            .map(|b| b.mode)
            .unwrap_or(RegionMode::Au)
    }

    /// Validate all referenced landmark indices against `landmark_count`.
    pub fn validate(&self) -> Result<()> {
        let m = self.landmark_count;
        if self.iod_pair.0 >= m || self.iod_pair.1 >= m {
            return Err(Error::Config(format!(
                "iod pair ({}, {}) out of range for {m} landmarks",
                self.iod_pair.0, self.iod_pair.1
            )));
        }
        for b in &self.branches {
            for c in &b.centers {
                if c.max_index() >= m {
                    return Err(Error::Config(format!(
                        "branch {}: rule references landmark {} but only {m} exist",
                        b.name,
                        c.max_index()
                    )));
                }
            }
            if !(b.default_scale > 0.0) {
                return Err(Error::Config(format!(
                    "branch {}: default scale must be positive",
                    b.name
                )));
            }
        }
        Ok(())
    }

    pub fn interocular(&self, lmk: &Landmarks) -> f64 {
        let (a, b) = self.iod_pair;
        let (x1, y1) = lmk.points[a];
        let (x2, y2) = lmk.points[b];
        ((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt()
    }

    pub fn parse_str(text: &str, path: &str) -> Result<Self> {
        let mut landmark_count = None;
        let mut iod_pair = None;
        let mut branches = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: ln + 1,
                msg,
            };
            let mut tokens = line.split_whitespace();
            match tokens.next().unwrap() {
                "landmarks" => {
                    let v = tokens
                        .next()
                        .ok_or_else(|| err("missing landmark count".into()))?;
                    landmark_count =
                        Some(v.parse::<usize>().map_err(|e| err(format!("{e}")))?);
                }
                "iod" => {
                    let a = tokens.next().ok_or_else(|| err("missing iod index".into()))?;
                    let b = tokens.next().ok_or_else(|| err("missing iod index".into()))?;
                    iod_pair = Some((
                        a.parse::<usize>().map_err(|e| err(format!("{e}")))?,
                        b.parse::<usize>().map_err(|e| err(format!("{e}")))?,
                    ));
                }
                "branch" => {
                    let name = tokens
                        .next()
                        .ok_or_else(|| err("missing branch name".into()))?
                        .to_string();
                    let rest: Vec<&str> = tokens.collect();
                    let mut centers = Vec::new();
                    let mut scale = None;
                    let mut mode = None;
                    for tok in rest {
                        if let Some(v) = tok.strip_prefix("scale=") {
                            scale =
                                Some(v.parse::<f64>().map_err(|e| err(format!("{e}")))?);
                        } else if let Some(v) = tok.strip_prefix("mode=") {
                            mode = Some(
                                RegionMode::parse(v)
                                    .ok_or_else(|| err(format!("unknown mode {v}")))?,
                            );
                        } else {
                            centers.push(parse_center(tok).map_err(|m| err(m))?);
                        }
                    }
                    let scale = scale.ok_or_else(|| err("missing scale=".into()))?;
                    let mode = mode.ok_or_else(|| err("missing mode=".into()))?;
                    let centers: [CenterRule; 2] = match centers.len() {
                        1 => [centers[0], centers[0]],
                        2 => [centers[0], centers[1]],
                        k => return Err(err(format!("expected 1 or 2 centers, got {k}"))),
                    };
                    branches.push(BranchRule {
                        name,
                        centers,
                        default_scale: scale,
                        mode,
                    });
                }
                other => {
                    return Err(err(format!("unknown directive {other}")));
                }
            }
        }
        let table = RuleTable {
            landmark_count: landmark_count.ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: 0,
                msg: "missing `landmarks` directive".into(),
            })?,
            iod_pair: iod_pair.ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: 0,
                msg: "missing `iod` directive".into(),
            })?,
            branches,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "landmarks {}", self.landmark_count);
        let _ = writeln!(out, "iod {} {}", self.iod_pair.0, self.iod_pair.1);
        for b in &self.branches {
            let _ = write!(out, "branch {}", b.name);
            let degenerate = b.centers[0] == b.centers[1];
            let n = if degenerate { 1 } else { 2 };
            for c in b.centers.iter().take(n) {
                let anchor = match c.anchor {
                    Anchor::Landmark(i) => format!("lmk({i})"),
                    Anchor::Midpoint(i, j) => format!("mid({i},{j})"),
                };
                let _ = write!(out, " {anchor}+({},{})", c.offset.0, c.offset.1);
            }
            let _ = writeln!(out, " scale={} mode={}", b.default_scale, b.mode.as_str());
        }
        out
    }
}

fn parse_center(tok: &str) -> std::result::Result<CenterRule, String> {
    let (anchor_part, offset_part) = match tok.split_once("+(") {
        Some((a, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| format!("bad offset in {tok}"))?;
            (a, Some(inner))
        }
        None => (tok, None),
    };
    let anchor = if let Some(rest) = anchor_part.strip_prefix("lmk(") {
        let i = rest
            .strip_suffix(')')
            .ok_or_else(|| format!("bad anchor in {tok}"))?
            .parse::<usize>()
            .map_err(|e| format!("{e}"))?;
        Anchor::Landmark(i)
    } else if let Some(rest) = anchor_part.strip_prefix("mid(") {
        let inner = rest
            .strip_suffix(')')
            .ok_or_else(|| format!("bad anchor in {tok}"))?;
        let (a, b) = inner
            .split_once(',')
            .ok_or_else(|| format!("mid() needs two indices in {tok}"))?;
        Anchor::Midpoint(
            a.trim().parse().map_err(|e| format!("{e}"))?,
            b.trim().parse().map_err(|e| format!("{e}"))?,
        )
    } else {
        return Err(format!("unknown anchor syntax {tok}"));
    };
    let offset = match offset_part {
        Some(inner) => {
            let (dx, dy) = inner
                .split_once(',')
                .ok_or_else(|| format!("offset needs two values in {tok}"))?;
            (
                dx.trim().parse::<f64>().map_err(|e| format!("{e}"))?,
                dy.trim().parse::<f64>().map_err(|e| format!("{e}"))?,
            )
        }
        None => (0.0, 0.0),
    };
    Ok(CenterRule { anchor, offset })
}

/// Resolved region for one branch: the mirror pair of centers plus its scale.
#[derive(Clone, Debug)]
pub struct RegionSpec {
    pub branch_index: usize,
    pub centers: [(f64, f64); 2],
    pub offset: [(f64, f64); 2],
    pub scale: f64,
    pub mode: RegionMode,
}

/// Gaussian attention over the feature grid.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub grid: ArrayD<f64>, // [H, W]
    pub peak: (usize, usize),
}

/// Apply the rule table, add learned offsets (feature-map units, one (dx,dy)
/// per center), and clamp into the feature map.
pub fn compute_centers(
    landmarks: &Landmarks,
    table: &RuleTable,
    offsets: &[(f64, f64)],
    h: usize,
    w: usize,
) -> Result<Vec<RegionSpec>> {
    if landmarks.len() != table.landmark_count {
        return Err(Error::Input(format!(
            "expected {} landmarks, got {}",
            table.landmark_count,
            landmarks.len()
        )));
    }
    if landmarks
        .points
        .iter()
        .any(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(Error::Input("non-finite landmark".into()));
    }
    let n = table.n_branches();
    if offsets.len() != 2 * n {
        return Err(Error::Input(format!(
            "expected {} offsets (two per branch), got {}",
            2 * n,
            offsets.len()
        )));
    }
    table.validate()?;
    let iod = table.interocular(landmarks);
    let mut specs = Vec::with_capacity(n);
    for (bi, rule) in table.branches.iter().enumerate() {
        let mut centers = [(0.0, 0.0); 2];
        let mut offs = [(0.0, 0.0); 2];
        for k in 0..2 {
            let (cx, cy) = rule.centers[k].eval(landmarks, iod);
            let (dx, dy) = offsets[2 * bi + k];
            offs[k] = (dx, dy);
            centers[k] = (
                (cx + dx).clamp(0.0, (w - 1) as f64),
                (cy + dy).clamp(0.0, (h - 1) as f64),
            );
        }
        specs.push(RegionSpec {
            branch_index: bi,
            centers,
            offset: offs,
            scale: rule.default_scale,
            mode: rule.mode,
        });
    }
    Ok(specs)
}

/// Shared attention kernel: value at (x, y) given the two centers and sigma.
/// Truncates to zero outside radius 3*sigma of both centers.
#[inline]
fn attention_value(px: f64, py: f64, c: &[(f64, f64); 2], sigma: f64) -> f64 {
    let d0 = (px - c[0].0).powi(2) + (py - c[0].1).powi(2);
    let d1 = (px - c[1].0).powi(2) + (py - c[1].1).powi(2);
    let dmin = d0.min(d1);
    let cutoff = (3.0 * sigma).powi(2);
    if dmin > cutoff {
        0.0
    } else {
        (-dmin / (2.0 * sigma * sigma)).exp()
    }
}

/// Build the truncated Gaussian attention map for one region.
pub fn attention_map(
    spec: &RegionSpec,
    h: usize,
    w: usize,
    sigma_ratio: f64,
) -> Result<AttentionMap> {
    if h == 0 || w == 0 {
        return Err(Error::Input("attention map needs positive dims".into()));
    }
    let sigma = sigma_ratio * spec.scale * w as f64;
    if !(sigma > 0.0) {
        return Err(Error::Numeric(format!(
            "degenerate region: sigma = {sigma} for branch {}",
            spec.branch_index
        )));
    }
    let mut grid = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
    let mut peak = (0usize, 0usize);
    let mut best = f64::NEG_INFINITY;
    for yi in 0..h {
        for xi in 0..w {
            let v = attention_value(xi as f64, yi as f64, &spec.centers, sigma);
            grid[[yi, xi]] = v;
            if v > best {
                best = v;
                peak = (yi, xi);
            }
        }
    }
    Ok(AttentionMap { grid, peak })
}

/// Per-channel product of a feature map [C,H,W] with an attention map [H,W].
pub fn extract_patch_features(
    feature_map: &ArrayD<f64>,
    att: &AttentionMap,
) -> Result<ArrayD<f64>> {
    let fsh = feature_map.shape();
    let ash = att.grid.shape();
    if fsh.len() != 3 || ash != [fsh[1], fsh[2]] {
        return Err(Error::Input(format!(
            "attention dims {ash:?} do not match feature map {fsh:?}"
        )));
    }
    let mut out = feature_map.clone();
    for c in 0..fsh[0] {
        let mut plane = out.slice_mut(ndarray::s![c, .., ..]);
        plane.zip_mut_with(
            &att.grid.view().into_dimensionality::<ndarray::Ix2>().unwrap(),
            |v, &a| *v *= a,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Differentiable graph ops for the geometry path
// ---------------------------------------------------------------------------

impl Tape {
    /// Rule-table centers from predicted landmarks. Input [B, 2m] flattened
    /// (x, y) pairs, output [B, 4n]: per branch (x1, y1, x2, y2), no clamping.
    pub fn rule_centers(&self, landmarks: Var, table: &RuleTable) -> Var {
        let lv = self.value(landmarks);
        let sh = lv.shape().to_vec();
        assert_eq!(sh.len(), 2);
        let b = sh[0];
        let m = table.landmark_count;
        assert_eq!(sh[1], 2 * m, "rule_centers: landmark width mismatch");
        let n = table.n_branches();
        let (ia, ib) = table.iod_pair;
        let branches = table.branches.clone();

        let eval_sample = |flat: &[f64]| -> (Vec<f64>, f64) {
            let dx = flat[2 * ia] - flat[2 * ib];
            let dy = flat[2 * ia + 1] - flat[2 * ib + 1];
            let iod = (dx * dx + dy * dy).sqrt();
            let mut out = Vec::with_capacity(4 * n);
            for rule in &branches {
                for c in &rule.centers {
                    let (ax, ay) = match c.anchor {
                        Anchor::Landmark(i) => (flat[2 * i], flat[2 * i + 1]),
                        Anchor::Midpoint(i, j) => (
                            0.5 * (flat[2 * i] + flat[2 * j]),
                            0.5 * (flat[2 * i + 1] + flat[2 * j + 1]),
                        ),
                    };
                    out.push(ax + c.offset.0 * iod);
                    out.push(ay + c.offset.1 * iod);
                }
            }
            (out, iod)
        };

        let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, 4 * n]));
        for bi in 0..b {
            let row: Vec<f64> = lv
                .slice(ndarray::s![bi, ..])
                .iter()
                .cloned()
                .collect();
            let (vals, _) = eval_sample(&row);
            for (k, v) in vals.iter().enumerate() {
                y[[bi, k]] = *v;
            }
        }

        let lc = Rc::clone(&lv);
        let branches2 = table.branches.clone();
        self.op(y, &[landmarks], move |g| {
            let mut dl = ArrayD::<f64>::zeros(IxDyn(&[b, 2 * m]));
            for bi in 0..b {
                let row: Vec<f64> = lc.slice(ndarray::s![bi, ..]).iter().cloned().collect();
                let ddx = row[2 * ia] - row[2 * ib];
                let ddy = row[2 * ia + 1] - row[2 * ib + 1];
                let iod = (ddx * ddx + ddy * ddy).sqrt();
                // d(iod)/d(l_a) = (l_a - l_b)/iod, and the negative for l_b
                let (gix, giy) = if iod > 0.0 {
                    (ddx / iod, ddy / iod)
                } else {
                    (0.0, 0.0)
                };
                let mut k = 0;
                for rule in &branches2 {
                    for c in &rule.centers {
                        let gx = g[[bi, k]];
                        let gy = g[[bi, k + 1]];
                        k += 2;
                        match c.anchor {
                            Anchor::Landmark(i) => {
                                dl[[bi, 2 * i]] += gx;
                                dl[[bi, 2 * i + 1]] += gy;
                            }
                            Anchor::Midpoint(i, j) => {
                                dl[[bi, 2 * i]] += 0.5 * gx;
                                dl[[bi, 2 * j]] += 0.5 * gx;
                                dl[[bi, 2 * i + 1]] += 0.5 * gy;
                                dl[[bi, 2 * j + 1]] += 0.5 * gy;
                            }
                        }
                        let giod = gx * c.offset.0 + gy * c.offset.1;
                        dl[[bi, 2 * ia]] += giod * gix;
                        dl[[bi, 2 * ia + 1]] += giod * giy;
                        dl[[bi, 2 * ib]] -= giod * gix;
                        dl[[bi, 2 * ib + 1]] -= giod * giy;
                    }
                }
            }
            vec![dl]
        })
    }

    /// Truncated Gaussian attention map, differentiable w.r.t. centers and
    /// sigma. centers [B,4] = (x1,y1,x2,y2); sigma [B]; output [B,1,H,W].
    pub fn gaussian_attention(&self, centers: Var, sigma: Var, h: usize, w: usize) -> Var {
        let cv = self.value(centers);
        let sv = self.value(sigma);
        let b = cv.shape()[0];
        assert_eq!(cv.shape(), [b, 4]);
        assert_eq!(sv.shape(), [b]);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, 1, h, w]));
        for bi in 0..b {
            let c = [(cv[[bi, 0]], cv[[bi, 1]]), (cv[[bi, 2]], cv[[bi, 3]])];
            let s = sv[[bi]];
            for yi in 0..h {
                for xi in 0..w {
                    y[[bi, 0, yi, xi]] = attention_value(xi as f64, yi as f64, &c, s);
                }
            }
        }
        let cc = Rc::clone(&cv);
        let sc = Rc::clone(&sv);
        self.op(y, &[centers, sigma], move |g| {
            let mut dc = ArrayD::<f64>::zeros(IxDyn(&[b, 4]));
            let mut ds = ArrayD::<f64>::zeros(IxDyn(&[b]));
            for bi in 0..b {
                let c = [(cc[[bi, 0]], cc[[bi, 1]]), (cc[[bi, 2]], cc[[bi, 3]])];
                let s = sc[[bi]];
                let cutoff = (3.0 * s) * (3.0 * s);
                let inv_s2 = 1.0 / (s * s);
                for yi in 0..h {
                    for xi in 0..w {
                        let gv = g[[bi, 0, yi, xi]];
                        if gv == 0.0 {
                            continue;
                        }
                        let (px, py) = (xi as f64, yi as f64);
                        let d0 = (px - c[0].0).powi(2) + (py - c[0].1).powi(2);
                        let d1 = (px - c[1].0).powi(2) + (py - c[1].1).powi(2);
                        let (dmin, which) = if d0 <= d1 { (d0, 0) } else { (d1, 1) };
                        if dmin > cutoff {
                            continue;
                        }
                        let v = (-dmin * 0.5 * inv_s2).exp();
                        // dv/dc = v * (p - c)/s^2 ; dv/ds = v * d^2 / s^3
                        let (cx, cy) = c[which];
                        dc[[bi, 2 * which]] += gv * v * (px - cx) * inv_s2;
                        dc[[bi, 2 * which + 1]] += gv * v * (py - cy) * inv_s2;
                        ds[[bi]] += gv * v * dmin * inv_s2 / s;
                    }
                }
            }
            vec![dc, ds]
        })
    }
}
