use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{self, attention, causal_mask, two_way_gate};
use super::{Graph, NumericError, ParamId, ParamStore, Precision, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, floor: 1e-3, max_entries: usize::MAX }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_entry: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Parameters whose analytic gradient is identically zero.
    pub dead: Vec<String>,
}

/// Compare analytic gradients of `loss` with central differences over every
/// parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericError>,
{
    if store.precision() != Precision::F64 {
        return Err(NumericError::NeedsF64);
    }
    let eval = |s: &ParamStore| -> Result<f64, NumericError> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let n = store.get(id).len();
        let grad = analytic.get(id);
        if grad.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)) {
            report.dead.push(store.name(id).to_string());
        }
        let stride = n.div_ceil(opts.max_entries.min(n)).max(1);
        for k in (0..n).step_by(stride) {
            let a = grad.map_or(0.0, |t| t.data()[k]);
            let num = central_difference(&mut work, id, k, opts.step, &eval)?;
            let err = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_entry = k;
                report.worst_analytic = a;
                report.worst_numeric = num;
            }
        }
    }
    Ok(report)
}

fn central_difference(
    work: &mut ParamStore,
    id: ParamId,
    k: usize,
    h: f64,
    eval: &impl Fn(&ParamStore) -> Result<f64, NumericError>,
) -> Result<f64, NumericError> {
    let orig = work.get(id).data()[k];
    work.get_mut(id).data_mut()[k] = orig + h;
    let plus = eval(work)?;
    work.get_mut(id).data_mut()[k] = orig - h;
    let minus = eval(work)?;
    work.get_mut(id).data_mut()[k] = orig;
    Ok((plus - minus) / (2.0 * h))
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor, NumericError> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks every graph primitive and composite layer on small random inputs.
/// Each output is reduced through fixed random weights so all entries count.
pub fn primitive_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>, NumericError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(Precision::F64);
    let inputs = [
        ("a", random_tensor(&mut rng, 3, 4)?),
        ("b", random_tensor(&mut rng, 4, 2)?),
        ("c", random_tensor(&mut rng, 3, 4)?),
        ("row", random_tensor(&mut rng, 1, 4)?),
        ("col", random_tensor(&mut rng, 3, 1)?),
        ("pos", Tensor::matrix(3, 4, (0..12).map(|k| 0.5 + k as f64 * 0.1).collect())?),
        ("w", random_tensor(&mut rng, 3, 4)?),
    ];
    let mut ids = Vec::new();
    for (name, t) in inputs {
        ids.push(store.add(name, t)?);
    }
    let weights = random_tensor(&mut rng, 64, 64)?;
    type Case = fn(&mut Graph, &[Var]) -> Result<Var, NumericError>;
    let cases: Vec<(&str, Case)> = vec![
        ("matmul", |g, p| g.matmul(p[0], p[1])),
        ("matmul_bt", |g, p| g.matmul_bt(p[0], p[2])),
        ("transpose", |g, p| Ok(g.transpose(p[0]))),
        ("add", |g, p| g.add(p[0], p[2])),
        ("add_row", |g, p| g.add_row(p[0], p[3])),
        ("mul", |g, p| g.mul(p[0], p[2])),
        ("mul_row", |g, p| g.mul_row(p[0], p[3])),
        ("mul_col", |g, p| g.mul_col(p[0], p[4])),
        ("affine", |g, p| Ok(g.affine(p[0], -1.5, 0.25))),
        ("concat_cols", |g, p| g.concat_cols(&[p[0], p[4], p[2]])),
        ("concat_rows", |g, p| g.concat_rows(&[p[0], p[3], p[2]])),
        ("slice_cols", |g, p| g.slice_cols(p[0], 1, 2)),
        ("slice_rows", |g, p| g.slice_rows(p[0], 1, 2)),
        ("gather_rows", |g, p| g.gather_rows(p[0], &[2, 0, 2, 1])),
        ("reshape", |g, p| g.reshape(p[0], 6, 2)),
        ("softmax", |g, p| g.softmax(p[0], None)),
        ("softmax_masked", |g, p| {
            g.softmax(p[0], Some(&[true, false, true, true, false, false, false, true, true, true, true, false]))
        }),
        ("gelu", |g, p| Ok(g.gelu(p[0]))),
        ("tanh", |g, p| Ok(g.tanh(p[0]))),
        ("sigmoid", |g, p| Ok(g.sigmoid(p[0]))),
        ("log", |g, p| Ok(g.log(p[5]))),
        ("clamp_min", |g, p| Ok(g.clamp_min(p[5], 1.05))),
        ("sum_cols", |g, p| Ok(g.sum_cols(p[0]))),
        ("mean", |g, p| Ok(g.mean(p[0]))),
        ("select_sum", |g, p| g.select_sum(p[0], &[vec![0, 5, 11], vec![3], vec![3, 3]])),
        ("depthwise_conv", |g, p| g.depthwise_conv(p[0], p[6])),
        ("attention_causal", |g, p| {
            let mask = causal_mask(3);
            attention(g, p[0], p[2], p[6], 2, Some(&mask))
        }),
        ("two_way_gate", |g, p| {
            let b = g.transpose(p[1]);
            let k2 = g.gather_rows(b, &[0, 1, 0])?;
            Ok(two_way_gate(g, p[0], p[2], p[6], k2, p[5])?.0)
        }),
        ("multi_head_gate", |g, p| nn::multi_head_gate(g, p[0], p[2], p[6], p[5], p[0], 2)),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, case) in cases {
        let report = check_gradients(
            &store,
            |g| {
                let vars: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
                let y = case(g, &vars)?;
                let (m, n) = g.shape(y);
                let w: Vec<f64> = (0..m).flat_map(|r| weights.row_slice(r)[..n].to_vec()).collect();
                let w = g.constant(Tensor::matrix(m, n, w)?);
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            },
            &GradCheckOptions::default(),
        )?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}
