//! Comparison strategies: uniform-random batch selection and the
//! parallel-sequential wrapper that greedily assembles a batch from the
//! sequential acquisition using hallucinated observations.

use rand::Rng;

use crate::acquisition::{optimize_batch, AcquisitionContext, TrainingData};
use crate::error::Result;
use crate::pareto::random_candidates;

/// A batch together with the number of GP refit cycles spent choosing it.
#[derive(Debug, Clone)]
pub struct PsBatch {
    pub x: Vec<Vec<f64>>,
    /// context builds performed (one per hallucination step, so always `B`)
    pub refits: usize,
    /// acquisition value of the first selected point
    pub first_value: f64,
}

/// B i.i.d. uniform points within the bounds.
pub fn random_batch(bounds: &[(f64, f64)], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    random_candidates(bounds, batch_size, rng)
}

/// Greedy batch construction around the sequential (B = 1) acquisition.
///
/// Each inner step rebuilds the acquisition context from the working data
/// (hyper-parameters are the builder's responsibility and stay fixed),
/// optimizes the sequential acquisition, and hallucinates the result of the
/// chosen point as the hyper-averaged posterior mean of every black-box.
/// Hallucinations live only in the cloned working data and are discarded
/// when the batch is returned.
pub fn parallel_sequential<F, R>(
    data: &TrainingData,
    mut ctx_builder: F,
    batch_size: usize,
    n_restarts: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<PsBatch>
where
    F: FnMut(&TrainingData, &mut R) -> Result<AcquisitionContext>,
    R: Rng,
{
    let mut working = data.clone();
    let mut batch = Vec::with_capacity(batch_size);
    let mut refits = 0;
    let mut first_value = f64::NAN;
    for step in 0..batch_size {
        let ctx = ctx_builder(&working, rng)?;
        if ctx.batch_size != 1 {
            return Err(crate::error::Error::InvalidArgument(
                "parallel_sequential requires a B = 1 context".into(),
            ));
        }
        refits += 1;
        let proposal = optimize_batch(&ctx, n_restarts, max_iters, rng)?;
        let x = proposal.x[0].clone();
        if step == 0 {
            first_value = proposal.value;
        }
        let mean_over = |models: &dyn Fn(usize) -> f64, n: usize| -> f64 {
            (0..n).map(models).sum::<f64>() / n as f64
        };
        let s = ctx.conditions.len();
        for (k, y) in working.y_obj.iter_mut().enumerate() {
            y.push(mean_over(
                &|c| ctx.conditions[c].obj[k].model.predict_mean_var(&x).0,
                s,
            ));
        }
        for (j, y) in working.y_con.iter_mut().enumerate() {
            y.push(mean_over(
                &|c| ctx.conditions[c].con[j].model.predict_mean_var(&x).0,
                s,
            ));
        }
        working.x.push(x.clone());
        batch.push(x);
    }
    Ok(PsBatch {
        x: batch,
        refits,
        first_value,
    })
}
