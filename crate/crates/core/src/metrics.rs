//! Segmentation quality metrics: per-region Dice overlap and the 95th
//! percentile of symmetric boundary distances (HD95), plus the composite
//! tumor-region masks they are reported on.

use crate::error::{Error, Result};

/// Binary voxel mask over a D x H x W grid with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
    pub spacing: [f64; 3],
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        Self::with_spacing(dims, data, [1.0, 1.0, 1.0])
    }

    pub fn with_spacing(dims: [usize; 3], data: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!("mask buffer {} != {}x{}x{}", data.len(), dims[0], dims[1], dims[2])));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        Ok(Mask { dims, data, spacing })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Composite evaluation targets: whole tumor, tumor core, enhancing tumor.
#[derive(Clone, Debug)]
pub struct RegionMasks {
    pub wt: Mask,
    pub tc: Mask,
    pub et: Mask,
}

/// Splits a label volume into the three nested composite regions
/// (whole = {1,2,4}, core = {1,4}, enhancing = {4}).
pub fn composite_regions(labels: &[u32], dims: [usize; 3]) -> Result<RegionMasks> {
    let n: usize = dims.iter().product();
    if labels.len() != n {
        return Err(Error::shape(format!("label buffer {} != volume {n}", labels.len())));
    }
    let mut wt = vec![false; n];
    let mut tc = vec![false; n];
    let mut et = vec![false; n];
    for (i, &l) in labels.iter().enumerate() {
        match l {
            0 => {}
            1 => {
                wt[i] = true;
                tc[i] = true;
            }
            2 => wt[i] = true,
            4 => {
                wt[i] = true;
                tc[i] = true;
                et[i] = true;
            }
            other => return Err(Error::Data(format!("unexpected label value {other} at voxel {i}"))),
        }
    }
    Ok(RegionMasks {
        wt: Mask::new(dims, wt)?,
        tc: Mask::new(dims, tc)?,
        et: Mask::new(dims, et)?,
    })
}

fn check_pair(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("mask dims {:?} vs {:?}", a.dims, b.dims)));
    }
    if a.spacing != b.spacing {
        return Err(Error::Data(format!("mask spacing {:?} vs {:?}", a.spacing, b.spacing)));
    }
    Ok(())
}

/// Overlap score 2|a n b| / (|a| + |b|); a pair of empty masks scores 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_pair(a, b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground voxels with a background or out-of-bounds 6-neighbor.
pub fn boundary(m: &Mask) -> Vec<bool> {
    let [d, h, w] = m.dims;
    let at = |z: usize, y: usize, x: usize| m.data[(z * h + y) * w + x];
    let mut out = vec![false; m.data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let exposed = (z == 0 || !at(z - 1, y, x))
                    || (z + 1 == d || !at(z + 1, y, x))
                    || (y == 0 || !at(z, y - 1, x))
                    || (y + 1 == h || !at(z, y + 1, x))
                    || (x == 0 || !at(z, y, x - 1))
                    || (x + 1 == w || !at(z, y, x + 1));
                out[(z * h + y) * w + x] = exposed;
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// One pass of the exact lower-envelope distance transform along a line.
/// `f` holds squared distances, `step` the physical distance between
/// consecutive samples.
fn dt_line(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let w = step * step;
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64))
                / (2.0 * w * (q as f64 - p as f64));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = f[p] + w * d * d;
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest seed,
/// via three separable lower-envelope passes.
fn squared_edt(dims: [usize; 3], spacing: [f64; 3], seeds: &[bool]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut dist: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut line = vec![0.0f64; d.max(h).max(w)];
    let mut out = vec![0.0f64; d.max(h).max(w)];
    // x lines
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            line[..w].copy_from_slice(&dist[base..base + w]);
            dt_line(&line[..w], spacing[2], &mut out[..w]);
            dist[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // y lines
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = dist[(z * h + y) * w + x];
            }
            dt_line(&line[..h], spacing[1], &mut out[..h]);
            for y in 0..h {
                dist[(z * h + y) * w + x] = out[y];
            }
        }
    }
    // z lines
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = dist[(z * h + y) * w + x];
            }
            dt_line(&line[..d], spacing[0], &mut out[..d]);
            for z in 0..d {
                dist[(z * h + y) * w + x] = out[z];
            }
        }
    }
    dist
}

/// Percentile with linear interpolation between order statistics; `sorted`
/// must be ascending and nonempty.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th percentile of the pooled directed boundary distances between two
/// nonempty masks. An empty mask on either side leaves the metric undefined.
pub fn hd95(a: &Mask, b: &Mask) -> Result<f64> {
    check_pair(a, b)?;
    let ba = boundary(a);
    let bb = boundary(b);
    if !ba.contains(&true) || !bb.contains(&true) {
        return Err(Error::MissingValue("surface distance needs two nonempty masks".into()));
    }
    let to_b = squared_edt(a.dims, a.spacing, &bb);
    let to_a = squared_edt(a.dims, a.spacing, &ba);
    let mut pooled: Vec<f64> = Vec::new();
    for (i, &on) in ba.iter().enumerate() {
        if on {
            pooled.push(to_b[i].sqrt());
        }
    }
    for (i, &on) in bb.iter().enumerate() {
        if on {
            pooled.push(to_a[i].sqrt());
        }
    }
    pooled.sort_by(f64::total_cmp);
    Ok(percentile(&pooled, 0.95))
}

/// Dice and HD95 for one composite region; HD95 is absent when either mask
/// is empty.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RegionScore {
    pub dice: f64,
    pub hd95: Option<f64>,
}

/// Per-region scores plus averages; undefined HD95 values are excluded from
/// the mean and counted instead of being scored as zero.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub wt: RegionScore,
    pub tc: RegionScore,
    pub et: RegionScore,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_missing: usize,
}

fn score_region(pred: &Mask, gt: &Mask) -> Result<RegionScore> {
    let d = dice(pred, gt)?;
    let h = match hd95(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::MissingValue(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RegionScore { dice: d, hd95: h })
}

/// Scores a predicted label volume against ground truth on the three
/// composite regions.
pub fn evaluate_labels(
    pred: &[u32],
    gt: &[u32],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<EvalReport> {
    let mut p = composite_regions(pred, dims)?;
    let mut g = composite_regions(gt, dims)?;
    for m in [&mut p.wt, &mut p.tc, &mut p.et, &mut g.wt, &mut g.tc, &mut g.et] {
        m.spacing = spacing;
    }
    let wt = score_region(&p.wt, &g.wt)?;
    let tc = score_region(&p.tc, &g.tc)?;
    let et = score_region(&p.et, &g.et)?;
    let mean_dice = (wt.dice + tc.dice + et.dice) / 3.0;
    let present: Vec<f64> = [wt.hd95, tc.hd95, et.hd95].into_iter().flatten().collect();
    let mean_hd95 = if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    };
    let hd95_missing = 3 - present.len();
    Ok(EvalReport { wt, tc, et, mean_dice, mean_hd95, hd95_missing })
}
