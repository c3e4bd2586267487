//! Ray geometry of sublevel sets `{g < 1}` around the origin.

/// Smallest `t > 0` with `g(t u) >= 1`, to relative tolerance `rel_tol`.
/// `None` if `g(t u) < 1` for every scanned `t <= cap`.
///
/// The ray is scanned geometrically from `1e-3`; each doubling interval is
/// refined with a uniform sub-scan so thin excursions above 1 between two
/// doubling points are not skipped.
pub fn ray_exit(g: impl Fn(&[f64]) -> f64, u: &[f64], cap: f64, rel_tol: f64) -> Option<f64> {
    let mut x = vec![0.0; u.len()];
    let mut at = |t: f64| {
        for (xi, ui) in x.iter_mut().zip(u) {
            *xi = t * ui;
        }
        g(&x)
    };
    const SUB: usize = 16;
    let mut prev: f64 = 0.0;
    let mut t: f64 = 1e-3;
    let (mut lo, mut hi);
    'outer: loop {
        let t = {
            let cur = t;
            t = (2.0 * t).min(cap);
            cur
        };
        for k in 1..=SUB {
            let s = prev + (t - prev) * k as f64 / SUB as f64;
            if !(at(s) < 1.0) {
                lo = prev + (t - prev) * (k - 1) as f64 / SUB as f64;
                hi = s;
                break 'outer;
            }
        }
        if t >= cap {
            return None;
        }
        prev = t;
    }
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if at(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

/// Number of sign changes of `g - 1` along the ray up to `t_max`, sampled at
/// `steps` points. Used to flag non-star-shaped boundaries.
pub fn ray_crossings(g: impl Fn(&[f64]) -> f64, u: &[f64], t_max: f64, steps: usize) -> usize {
    let mut x = vec![0.0; u.len()];
    let mut inside = true;
    let mut count = 0;
    for k in 1..=steps {
        let t = t_max * k as f64 / steps as f64;
        for (xi, ui) in x.iter_mut().zip(u) {
            *xi = t * ui;
        }
        let now = g(&x) < 1.0;
        if now != inside {
            count += 1;
            inside = now;
        }
    }
    count
}

/// Evenly spaced unit directions in the plane, starting along `+x1`.
pub fn planar_directions(count: usize) -> Vec<[f64; 2]> {
    (0..count)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / count as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

pub fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|a| a / n).collect())
}
