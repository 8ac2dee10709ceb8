//! Nelder–Mead simplex minimization with a hard evaluation budget.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexOptions {
    /// Edge length of the initial simplex along each axis.
    pub step: f64,
    pub max_evaluations: usize,
    /// Stop once the simplex values and vertices both spread less than this.
    pub tolerance: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_evaluations: 500,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Every evaluated point with its value, in evaluation order.
    pub history: Vec<(Vec<f64>, f64)>,
}

impl SimplexResult {
    pub fn evaluations(&self) -> usize {
        self.history.len()
    }
}

/// Lexicographic order on points, used to break value ties.
pub fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Minimizes `f` from `x0`. Non-finite values are treated as `+∞`.
///
/// Coefficients are the standard ones: reflection 1, expansion 2,
/// contraction ½, shrink ½.
pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], options: &SimplexOptions) -> SimplexResult {
    let n = x0.len();
    let budget = options.max_evaluations.max(1);
    let mut history: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut eval = |x: &[f64], history: &mut Vec<(Vec<f64>, f64)>| {
        let v = f(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        history.push((x.to_vec(), v));
        v
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut history);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        if history.len() >= budget {
            break;
        }
        let mut x = x0.to_vec();
        x[i] += options.step;
        let v = eval(&x, &mut history);
        simplex.push((x, v));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lexicographic(&a.0, &b.0)));
    };

    while simplex.len() == n + 1 && n > 0 && history.len() < budget {
        order(&mut simplex);
        let spread = simplex[n].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread.abs() <= options.tolerance && size <= options.tolerance {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|i| simplex[..n].iter().map(|(x, _)| x[i]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect() };

        let xr = along(1.0);
        let vr = eval(&xr, &mut history);
        if vr < simplex[0].1 {
            if history.len() >= budget {
                simplex[n] = (xr, vr);
                break;
            }
            let xe = along(2.0);
            let ve = eval(&xe, &mut history);
            simplex[n] = if ve < vr { (xe, ve) } else { (xr, vr) };
            continue;
        }
        if vr < simplex[n - 1].1 {
            simplex[n] = (xr, vr);
            continue;
        }
        if history.len() >= budget {
            break;
        }
        // outside contraction when the reflection improved on the worst vertex
        let xc = if vr < worst.1 { along(0.5) } else { along(-0.5) };
        let vc = eval(&xc, &mut history);
        if vc < vr.min(worst.1) {
            simplex[n] = (xc, vc);
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            if history.len() >= budget {
                break;
            }
            let x: Vec<f64> = best.iter().zip(&vertex.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
            let v = eval(&x, &mut history);
            *vertex = (x, v);
        }
    }

    let (x, value) = history
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lexicographic(&a.0, &b.0)))
        .cloned()
        .expect("at least one evaluation");
    SimplexResult { x, value, history }
}
