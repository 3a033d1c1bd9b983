use irmap::imageops::Grid2D;

// Kernels rebuilt from their documented moments.
pub fn oracle_gauss(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

pub fn oracle_d1(sigma: f64) -> Vec<f64> {
    let g = oracle_gauss(sigma);
    let r = (g.len() / 2) as i64;
    let k: Vec<f64> = g.iter().enumerate().map(|(n, v)| (n as i64 - r) as f64 * v).collect();
    let m: f64 = k.iter().enumerate().map(|(n, v)| (n as i64 - r) as f64 * v).sum();
    k.into_iter().map(|v| v / m).collect()
}

pub fn oracle_d2(sigma: f64) -> Vec<f64> {
    let g = oracle_gauss(sigma);
    let r = (g.len() / 2) as i64;
    let s2 = sigma * sigma;
    let k: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(n, v)| {
            let i = (n as i64 - r) as f64;
            (i * i - s2) * v
        })
        .collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    let k: Vec<f64> = k.into_iter().map(|v| v - mean).collect();
    let m: f64 = k
        .iter()
        .enumerate()
        .map(|(n, v)| ((n as i64 - r) as f64).powi(2) * v)
        .sum();
    k.into_iter().map(|v| v * 2.0 / m).collect()
}

pub fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    // Reflect repeatedly: ...dcb|abcd|cba...
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2D correlation with the outer-product kernel `kx ⊗ ky`.
pub fn dense(img: &Grid2D, kx: &[f64], ky: &[f64]) -> Grid2D {
    let (w, h) = img.dims();
    let rx = (kx.len() / 2) as i64;
    let ry = (ky.len() / 2) as i64;
    Grid2D::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for (b, wy) in ky.iter().enumerate() {
            for (a, wx) in kx.iter().enumerate() {
                let sx = mirror(x as i64 + a as i64 - rx, w);
                let sy = mirror(y as i64 + b as i64 - ry, h);
                acc += wx * wy * img.get(sx, sy);
            }
        }
        acc
    })
    .unwrap()
}

pub fn add(a: &Grid2D, b: &Grid2D) -> Grid2D {
    Grid2D::from_fn(a.width(), a.height(), |x, y| a.get(x, y) + b.get(x, y)).unwrap()
}

/// Between-class variance of a split after bin `t`.
pub fn between_class(counts: &[u64], t: usize) -> f64 {
    let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (i, &c) in counts.iter().enumerate() {
        if i <= t {
            n0 += c as f64;
            s0 += (i as f64) * c as f64;
        } else {
            n1 += c as f64;
            s1 += (i as f64) * c as f64;
        }
    }
    if n0 == 0.0 || n1 == 0.0 {
        return f64::NEG_INFINITY;
    }
    let n = n0 + n1;
    (n0 / n) * (n1 / n) * (s0 / n0 - s1 / n1).powi(2)
}

pub fn flood_fill_count(fg: &[bool], w: usize, h: usize, eight: bool) -> (usize, Vec<Vec<usize>>) {
    let mut seen = vec![false; w * h];
    let mut clusters = Vec::new();
    for start in 0..w * h {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut members = Vec::new();
        while let Some(p) = stack.pop() {
            members.push(p);
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if (dx, dy) == (0, 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if fg[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters.sort();
    (clusters.len(), clusters)
}
