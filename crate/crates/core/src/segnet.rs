//! Point-wise segmentation network, the regression variant used as a
//! baseline, manual reverse-mode gradients and the Adam optimizer.
//!
//! Activations are stored as `(B*M) x C` matrices; the rows of plot `b`
//! occupy `b*M .. (b+1)*M`.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::NUM_FEATURES;
use crate::scalar::Scalar;

pub const NUM_CLASSES: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DROPOUT: f64 = 0.4;

const LOCAL_WIDTH: usize = 32;
const GLOBAL_WIDTH: usize = 128;

pub const SEGNET_ARCHITECTURE: &str = "segnet 9-32-32 | 32-64-128 | max | 160-64-32-d-4 | softmax";
pub const REGRESSION_ARCHITECTURE: &str = "regression 9-32-32-64-128 | max | 128-64-32-d-3 | sigmoid";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates and dropout drawn from the seed.
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Clone, Debug)]
struct BatchNorm<F> {
    gamma: Array1<F>,
    beta: Array1<F>,
    running_mean: Array1<F>,
    running_var: Array1<F>,
}

#[derive(Clone, Debug)]
struct Block<F> {
    weight: Array2<F>,
    bias: Array1<F>,
    norm: Option<BatchNorm<F>>,
    relu: bool,
}

struct BlockCache<F> {
    x_hat: Option<Array2<F>>,
    inv_std: Vec<F>,
    out: Array2<F>,
}

struct BlockGrads<F> {
    weight: Array2<F>,
    bias: Array1<F>,
    norm: Option<(Vec<F>, Vec<F>)>,
}

fn rows<F>(a: &Array2<F>) -> std::slice::ChunksExact<'_, F> {
    a.as_slice().expect("standard layout").chunks_exact(a.ncols().max(1))
}

fn rows_mut<F>(a: &mut Array2<F>) -> std::slice::ChunksExactMut<'_, F> {
    let c = a.ncols().max(1);
    a.as_slice_mut().expect("standard layout").chunks_exact_mut(c)
}

fn column_sums<F: Scalar>(a: &Array2<F>) -> Vec<f64> {
    let mut sums = vec![0.0; a.ncols()];
    for row in rows(a) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    sums
}

impl<F: Scalar> Block<F> {
    fn new(fan_in: usize, fan_out: usize, norm: bool, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = if relu {
            (6.0 / fan_in as f64).sqrt()
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| F::of(rng.random_range(-bound..bound)));
        let norm = norm.then(|| BatchNorm {
            gamma: Array1::ones(fan_out),
            beta: Array1::zeros(fan_out),
            running_mean: Array1::zeros(fan_out),
            running_var: Array1::ones(fan_out),
        });
        Block {
            weight,
            bias: Array1::zeros(fan_out),
            norm,
            relu,
        }
    }

    fn affine(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut h = x.dot(&self.weight);
        h += &self.bias;
        h
    }

    /// Normalization and activation of the pre-activations `h`. In training
    /// mode also returns the batch mean and unbiased variance.
    fn activate(&self, mut h: Array2<F>, train: bool) -> (BlockCache<F>, Option<(Vec<f64>, Vec<f64>)>) {
        let c = h.ncols();
        let mut cache = BlockCache {
            x_hat: None,
            inv_std: Vec::new(),
            out: Array2::zeros((0, c)),
        };
        let mut stats = None;
        let floor = if self.relu { F::zero() } else { F::neg_infinity() };
        let out = match &self.norm {
            None => {
                if self.relu {
                    h.mapv_inplace(|v| v.max(F::zero()));
                }
                h
            }
            Some(bn) if train => {
                let n = h.nrows().max(1) as f64;
                // Shifted sums keep the one-pass variance accurate.
                let shift: Vec<f64> = rows(&h).next().map_or(vec![0.0; c], |r| r.iter().map(|x| x.as_f64()).collect());
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for row in rows(&h) {
                    for (((a, b), x), k) in s1.iter_mut().zip(&mut s2).zip(row).zip(&shift) {
                        let d = x.as_f64() - k;
                        *a += d;
                        *b += d * d;
                    }
                }
                let mean: Vec<f64> = s1.iter().zip(&shift).map(|(a, k)| k + a / n).collect();
                let var: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| (b / n - (a / n) * (a / n)).max(0.0)).collect();
                let inv: Vec<F> = var.iter().map(|v| F::of(1.0 / (v + BN_EPS).sqrt())).collect();
                let mean_f: Vec<F> = mean.iter().map(|&m| F::of(m)).collect();
                let mut out = Array2::zeros(h.raw_dim());
                for (row, o) in rows_mut(&mut h).zip(rows_mut(&mut out)) {
                    let params = mean_f.iter().zip(&inv).zip(bn.gamma.iter().zip(&bn.beta));
                    for ((x, y), ((m, s), (g, b))) in row.iter_mut().zip(o).zip(params) {
                        *x = (*x - *m) * *s;
                        *y = (*x * *g + *b).max(floor);
                    }
                }
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                stats = Some((mean, var.iter().map(|v| v * unbiased).collect()));
                cache.x_hat = Some(h);
                cache.inv_std = inv;
                out
            }
            Some(bn) => {
                let scale: Vec<F> = (0..c)
                    .map(|j| bn.gamma[j] / (bn.running_var[j] + F::of(BN_EPS)).sqrt())
                    .collect();
                let shift: Vec<F> = (0..c).map(|j| bn.beta[j] - bn.running_mean[j] * scale[j]).collect();
                for row in rows_mut(&mut h) {
                    for ((x, a), b) in row.iter_mut().zip(&scale).zip(&shift) {
                        *x = (*x * *a + *b).max(floor);
                    }
                }
                h
            }
        };
        cache.out = out;
        (cache, stats)
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        if let Some(bn) = &mut self.norm {
            let m = F::of(BN_MOMENTUM);
            let keep = F::one() - m;
            for j in 0..mean.len() {
                bn.running_mean[j] = keep * bn.running_mean[j] + m * F::of(mean[j]);
                bn.running_var[j] = keep * bn.running_var[j] + m * F::of(var[j]);
            }
        }
    }

    /// Maps the gradient at the block output to the gradient at the affine
    /// output, returning the normalization parameter gradients alongside.
    fn deactivate(&self, cache: &BlockCache<F>, mut d: Array2<F>) -> Result<(Array2<F>, Option<(Vec<F>, Vec<F>)>)> {
        if self.relu {
            let out = cache.out.as_slice().expect("standard layout");
            let grad = d.as_slice_mut().expect("standard layout");
            for (g, o) in grad.iter_mut().zip(out) {
                if *o <= F::zero() {
                    *g = F::zero();
                }
            }
        }
        let Some(bn) = &self.norm else {
            return Ok((d, None));
        };
        let x_hat = cache
            .x_hat
            .as_ref()
            .ok_or_else(|| Error::Contract("backward through an evaluation-mode pass".into()))?;
        let c = d.ncols();
        let n = d.nrows().max(1) as f64;
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for (row, xr) in rows(&d).zip(rows(x_hat)) {
            for (((db, dg), g), x) in dbeta.iter_mut().zip(&mut dgamma).zip(row).zip(xr) {
                *db += g.as_f64();
                *dg += (*g * *x).as_f64();
            }
        }
        let mean_d: Vec<F> = dbeta.iter().map(|v| F::of(v / n)).collect();
        let mean_dx: Vec<F> = dgamma.iter().map(|v| F::of(v / n)).collect();
        let scale: Vec<F> = (0..c).map(|j| bn.gamma[j] * cache.inv_std[j]).collect();
        for (row, xr) in rows_mut(&mut d).zip(rows(x_hat)) {
            let params = scale.iter().zip(&mean_d).zip(&mean_dx);
            for ((g, x), ((s, md), mx)) in row.iter_mut().zip(xr).zip(params) {
                *g = *s * (*g - *md - *x * *mx);
            }
        }
        let to_f = |v: Vec<f64>| v.into_iter().map(F::of).collect::<Vec<F>>();
        Ok((d, Some((to_f(dgamma), to_f(dbeta)))))
    }

    fn grads(&self, input: ArrayView2<'_, F>, dh: &Array2<F>, norm: Option<(Vec<F>, Vec<F>)>) -> BlockGrads<F> {
        BlockGrads {
            weight: input.t().dot(dh),
            bias: column_sums(dh).into_iter().map(F::of).collect(),
            norm,
        }
    }

    fn parameters(&self) -> Vec<&[F]> {
        let mut out = vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ];
        if let Some(bn) = &self.norm {
            out.push(bn.gamma.as_slice().expect("standard layout"));
            out.push(bn.beta.as_slice().expect("standard layout"));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ];
        if let Some(bn) = &mut self.norm {
            out.push(bn.gamma.as_slice_mut().expect("standard layout"));
            out.push(bn.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn running_stats(&self) -> Vec<&[F]> {
        match &self.norm {
            Some(bn) => vec![
                bn.running_mean.as_slice().expect("standard layout"),
                bn.running_var.as_slice().expect("standard layout"),
            ],
            None => Vec::new(),
        }
    }

    fn running_stats_mut(&mut self) -> Vec<&mut [F]> {
        match &mut self.norm {
            Some(bn) => vec![
                bn.running_mean.as_slice_mut().expect("standard layout"),
                bn.running_var.as_slice_mut().expect("standard layout"),
            ],
            None => Vec::new(),
        }
    }
}

fn flatten_grads<F: Scalar>(blocks: Vec<Option<BlockGrads<F>>>) -> Gradients<F> {
    let mut tensors = Vec::new();
    for g in blocks {
        let g = g.expect("every block receives a gradient");
        tensors.push(g.weight.into_iter().collect());
        tensors.push(g.bias.to_vec());
        if let Some((dg, db)) = g.norm {
            tensors.push(dg);
            tensors.push(db);
        }
    }
    Gradients { tensors }
}

/// Parameter gradients, in the order of [`Network::parameters`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub tensors: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn scale(&mut self, factor: F) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn add(&mut self, other: &Gradients<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }

    pub fn flat(&self) -> Vec<F> {
        self.tensors.iter().flatten().copied().collect()
    }
}

/// Common access to trainable weights and normalization statistics.
pub trait Network<F: Scalar> {
    fn parameters(&self) -> Vec<&[F]>;
    fn parameters_mut(&mut self) -> Vec<&mut [F]>;
    fn running_stats(&self) -> Vec<&[F]>;
    fn running_stats_mut(&mut self) -> Vec<&mut [F]>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Intermediate values of one forward pass, consumed by a single backward
/// pass.
pub struct Tape<F> {
    batch: usize,
    points: usize,
    train: bool,
    input: Array2<F>,
    caches: Vec<BlockCache<F>>,
    pooled: Array2<F>,
    pool_argmax: Vec<usize>,
    dropout_mask: Option<Array2<F>>,
    output: Array2<F>,
    consumed: bool,
}

impl<F> Tape<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn points(&self) -> usize {
        self.points
    }

    fn consume(&mut self) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("tape was already used by a backward pass".into()));
        }
        if !self.train {
            return Err(Error::Contract("backward through an evaluation-mode pass".into()));
        }
        self.consumed = true;
        Ok(())
    }
}

fn flatten_input<F: Scalar>(x: ArrayView3<'_, F>) -> Result<Array2<F>> {
    let (b, m, c) = x.dim();
    if b == 0 || m == 0 || c != NUM_FEATURES {
        return Err(Error::Contract(format!(
            "input must be B x M x {NUM_FEATURES} with B, M > 0, got {b} x {m} x {c}"
        )));
    }
    Ok(x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * m, c))
        .expect("contiguous"))
}

/// Per-plot channel maxima; ties go to the first row.
fn max_pool<F: Scalar>(f: &Array2<F>, batch: usize, points: usize) -> (Array2<F>, Vec<usize>) {
    let c = f.ncols();
    let mut pooled = Array2::<F>::zeros((batch, c));
    let mut argmax = vec![0usize; batch * c];
    for b in 0..batch {
        let block = f.slice(s![b * points..(b + 1) * points, ..]);
        let mut best: Vec<F> = block.row(0).to_vec();
        let arg = &mut argmax[b * c..(b + 1) * c];
        arg.iter_mut().for_each(|a| *a = b * points);
        for (r, row) in block.rows().into_iter().enumerate().skip(1) {
            for (j, &v) in row.iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    arg[j] = b * points + r;
                }
            }
        }
        pooled.row_mut(b).assign(&Array1::from(best));
    }
    (pooled, argmax)
}

fn max_pool_backward<F: Scalar>(d_pooled: &Array2<F>, argmax: &[usize], rows: usize) -> Array2<F> {
    let c = d_pooled.ncols();
    let mut d = Array2::<F>::zeros((rows, c));
    for (b, row) in d_pooled.rows().into_iter().enumerate() {
        for (j, &g) in row.iter().enumerate() {
            d[[argmax[b * c + j], j]] += g;
        }
    }
    d
}

fn dropout_mask<F: Scalar>(shape: (usize, usize), seed: u64) -> Array2<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = F::of(1.0 / (1.0 - DROPOUT));
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < DROPOUT {
            F::zero()
        } else {
            keep
        }
    })
}

fn softmax_rows<F: Scalar>(logits: &mut Array2<F>) {
    for row in rows_mut(logits) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Per-point classifier over the four vertical classes.
#[derive(Clone, Debug)]
pub struct SegNet<F> {
    blocks: Vec<Block<F>>,
}

impl<F: Scalar> SegNet<F> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        for (i, o) in [(NUM_FEATURES, 32), (32, LOCAL_WIDTH), (LOCAL_WIDTH, 64), (64, GLOBAL_WIDTH)] {
            blocks.push(Block::new(i, o, true, true, &mut rng));
        }
        blocks.push(Block::new(LOCAL_WIDTH + GLOBAL_WIDTH, 64, true, true, &mut rng));
        blocks.push(Block::new(64, 32, true, true, &mut rng));
        blocks.push(Block::new(32, NUM_CLASSES, false, false, &mut rng));
        SegNet { blocks }
    }

    fn run(&self, x: ArrayView3<'_, F>, mode: Mode) -> Result<(Tape<F>, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
        let (batch, points, _) = x.dim();
        let input = flatten_input(x)?;
        let train = matches!(mode, Mode::Train { .. });
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::with_capacity(self.blocks.len());
        let mut push = |caches: &mut Vec<BlockCache<F>>, (c, st)| {
            caches.push(c);
            stats.push(st);
        };

        let h = self.blocks[0].affine(input.view());
        push(&mut caches, self.blocks[0].activate(h, train));
        for i in 1..4 {
            let h = self.blocks[i].affine(caches[i - 1].out.view());
            push(&mut caches, self.blocks[i].activate(h, train));
        }
        let (pooled, pool_argmax) = max_pool(&caches[3].out, batch, points);

        let concat = &self.blocks[4];
        let mut h = caches[1].out.dot(&concat.weight.slice(s![..LOCAL_WIDTH, ..]));
        let global = pooled.dot(&concat.weight.slice(s![LOCAL_WIDTH.., ..]));
        for b in 0..batch {
            let g = global.row(b);
            for mut row in h.slice_mut(s![b * points..(b + 1) * points, ..]).rows_mut() {
                row += &g;
                row += &concat.bias;
            }
        }
        push(&mut caches, concat.activate(h, train));

        let h = self.blocks[5].affine(caches[4].out.view());
        push(&mut caches, self.blocks[5].activate(h, train));

        let dropout = match mode {
            Mode::Train { dropout_seed } => Some(dropout_mask::<F>(caches[5].out.dim(), dropout_seed)),
            Mode::Eval => None,
        };
        let logits = match &dropout {
            Some(mask) => self.blocks[6].affine((&caches[5].out * mask).view()),
            None => self.blocks[6].affine(caches[5].out.view()),
        };
        let (cache, st) = self.blocks[6].activate(logits, train);
        let mut output = cache.out.clone();
        push(&mut caches, (cache, st));
        softmax_rows(&mut output);

        let tape = Tape {
            batch,
            points,
            train,
            input,
            caches,
            pooled,
            pool_argmax,
            dropout_mask: dropout,
            output,
            consumed: false,
        };
        Ok((tape, stats))
    }

    /// Class probabilities `B x M x 4` and the tape for [`SegNet::backward`].
    /// Training mode updates the normalization running statistics.
    pub fn forward(&mut self, x: ArrayView3<'_, F>, mode: Mode) -> Result<(Array3<F>, Tape<F>)> {
        let (tape, stats) = self.run(x, mode)?;
        for (block, st) in self.blocks.iter_mut().zip(stats) {
            if let Some((mean, var)) = st {
                block.update_running(&mean, &var);
            }
        }
        let probs = tape
            .output
            .clone()
            .into_shape_with_order((tape.batch, tape.points, NUM_CLASSES))
            .expect("contiguous");
        Ok((probs, tape))
    }

    /// Evaluation-mode probabilities.
    pub fn predict(&self, x: ArrayView3<'_, F>) -> Result<Array3<F>> {
        let (tape, _) = self.run(x, Mode::Eval)?;
        Ok(tape
            .output
            .into_shape_with_order((tape.batch, tape.points, NUM_CLASSES))
            .expect("contiguous"))
    }

    /// Parameter gradients given the gradient of the objective with respect
    /// to the output probabilities.
    pub fn backward(&self, tape: &mut Tape<F>, d_probs: ArrayView3<'_, F>) -> Result<Gradients<F>> {
        if d_probs.dim() != (tape.batch, tape.points, NUM_CLASSES) {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match the forward pass",
                d_probs.dim()
            )));
        }
        tape.consume()?;
        let n = tape.batch * tape.points;
        let mut d = d_probs
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, NUM_CLASSES))
            .expect("contiguous");
        for (drow, prow) in rows_mut(&mut d).zip(rows(&tape.output)) {
            let dot = drow.iter().zip(prow).fold(F::zero(), |a, (g, p)| a + *g * *p);
            for (g, p) in drow.iter_mut().zip(prow) {
                *g = *p * (*g - dot);
            }
        }

        let mut grads: Vec<Option<BlockGrads<F>>> = (0..self.blocks.len()).map(|_| None).collect();
        let c = &tape.caches;
        let mask = tape.dropout_mask.as_ref().expect("training pass has a dropout mask");

        let (dh, norm) = self.blocks[6].deactivate(&c[6], d)?;
        let dropped = &c[5].out * mask;
        grads[6] = Some(self.blocks[6].grads(dropped.view(), &dh, norm));
        let d = dh.dot(&self.blocks[6].weight.t()) * mask;

        let (dh, norm) = self.blocks[5].deactivate(&c[5], d)?;
        grads[5] = Some(self.blocks[5].grads(c[4].out.view(), &dh, norm));
        let d = dh.dot(&self.blocks[5].weight.t());

        let concat = &self.blocks[4];
        let (dh, norm) = concat.deactivate(&c[4], d)?;
        let mut d_sum = Array2::<F>::zeros((tape.batch, dh.ncols()));
        for b in 0..tape.batch {
            let block = dh.slice(s![b * tape.points..(b + 1) * tape.points, ..]);
            let sums = column_sums(&block.to_owned());
            d_sum.row_mut(b).iter_mut().zip(sums).for_each(|(o, v)| *o = F::of(v));
        }
        let w_local = concat.weight.slice(s![..LOCAL_WIDTH, ..]);
        let w_global = concat.weight.slice(s![LOCAL_WIDTH.., ..]);
        let weight = concatenate![Axis(0), c[1].out.t().dot(&dh), tape.pooled.t().dot(&d_sum)];
        grads[4] = Some(BlockGrads {
            weight,
            bias: column_sums(&dh).into_iter().map(F::of).collect(),
            norm,
        });
        let mut d_local = dh.dot(&w_local.t());
        let d_pooled = d_sum.dot(&w_global.t());

        let d = max_pool_backward(&d_pooled, &tape.pool_argmax, n);
        let (dh, norm) = self.blocks[3].deactivate(&c[3], d)?;
        grads[3] = Some(self.blocks[3].grads(c[2].out.view(), &dh, norm));
        let d = dh.dot(&self.blocks[3].weight.t());

        let (dh, norm) = self.blocks[2].deactivate(&c[2], d)?;
        grads[2] = Some(self.blocks[2].grads(c[1].out.view(), &dh, norm));
        d_local += &dh.dot(&self.blocks[2].weight.t());

        let (dh, norm) = self.blocks[1].deactivate(&c[1], d_local)?;
        grads[1] = Some(self.blocks[1].grads(c[0].out.view(), &dh, norm));
        let d = dh.dot(&self.blocks[1].weight.t());

        let (dh, norm) = self.blocks[0].deactivate(&c[0], d)?;
        grads[0] = Some(self.blocks[0].grads(tape.input.view(), &dh, norm));

        Ok(flatten_grads(grads))
    }

    pub fn cast<G: Scalar>(&self) -> SegNet<G> {
        SegNet {
            blocks: self.blocks.iter().map(cast_block).collect(),
        }
    }

    pub fn to_checkpoint(&self, m_points: usize, raster_k: usize) -> Checkpoint {
        Checkpoint {
            architecture: SEGNET_ARCHITECTURE.to_string(),
            classes: crate::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            m_points,
            raster_k,
            parameters: to_f64(self.parameters()),
            running_stats: to_f64(self.running_stats()),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.architecture != SEGNET_ARCHITECTURE {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has '{}', expected '{SEGNET_ARCHITECTURE}'",
                ckpt.architecture
            )));
        }
        if ckpt.classes.iter().map(String::as_str).ne(crate::CLASS_NAMES.iter().copied()) {
            return Err(Error::Checkpoint(format!("class order mismatch: {:?}", ckpt.classes)));
        }
        let mut net = SegNet::new(0);
        fill(net.parameters_mut(), &ckpt.parameters, "parameter")?;
        fill(net.running_stats_mut(), &ckpt.running_stats, "running statistic")?;
        Ok(net)
    }
}

fn cast_block<F: Scalar, G: Scalar>(b: &Block<F>) -> Block<G> {
    let c1 = |a: &Array1<F>| a.mapv(|v| G::of(v.as_f64()));
    Block {
        weight: b.weight.mapv(|v| G::of(v.as_f64())),
        bias: c1(&b.bias),
        norm: b.norm.as_ref().map(|n| BatchNorm {
            gamma: c1(&n.gamma),
            beta: c1(&n.beta),
            running_mean: c1(&n.running_mean),
            running_var: c1(&n.running_var),
        }),
        relu: b.relu,
    }
}

fn to_f64<F: Scalar>(tensors: Vec<&[F]>) -> Vec<Vec<f64>> {
    tensors.iter().map(|t| t.iter().map(|v| v.as_f64()).collect()).collect()
}

fn fill<F: Scalar>(dst: Vec<&mut [F]>, src: &[Vec<f64>], what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} {what} tensors, found {}",
            dst.len(),
            src.len()
        )));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.len() != s.len() {
            return Err(Error::Checkpoint(format!(
                "{what} tensor {i} has {} values, expected {}",
                s.len(),
                d.len()
            )));
        }
        for (x, &v) in d.iter_mut().zip(s) {
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("{what} tensor {i} holds {v}")));
            }
            *x = F::of(v);
        }
    }
    Ok(())
}

impl<F: Scalar> Network<F> for SegNet<F> {
    fn parameters(&self) -> Vec<&[F]> {
        self.blocks.iter().flat_map(Block::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [F]> {
        self.blocks.iter_mut().flat_map(Block::parameters_mut).collect()
    }

    fn running_stats(&self) -> Vec<&[F]> {
        self.blocks.iter().flat_map(Block::running_stats).collect()
    }

    fn running_stats_mut(&mut self) -> Vec<&mut [F]> {
        self.blocks.iter_mut().flat_map(Block::running_stats_mut).collect()
    }
}

/// Trained network with the sampling and raster settings it was trained for.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: String,
    pub classes: Vec<String>,
    pub m_points: usize,
    pub raster_k: usize,
    pub parameters: Vec<Vec<f64>>,
    pub running_stats: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Direct regression of the three occupancies from the whole plot.
#[derive(Clone, Debug)]
pub struct RegressionNet<F> {
    blocks: Vec<Block<F>>,
}

impl<F: Scalar> RegressionNet<F> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        for (i, o) in [(NUM_FEATURES, 32), (32, 32), (32, 64), (64, GLOBAL_WIDTH)] {
            blocks.push(Block::new(i, o, true, true, &mut rng));
        }
        blocks.push(Block::new(GLOBAL_WIDTH, 64, false, true, &mut rng));
        blocks.push(Block::new(64, 32, false, true, &mut rng));
        blocks.push(Block::new(32, 3, false, false, &mut rng));
        RegressionNet { blocks }
    }

    fn run(&self, x: ArrayView3<'_, F>, mode: Mode) -> Result<(Tape<F>, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
        let (batch, points, _) = x.dim();
        let input = flatten_input(x)?;
        let train = matches!(mode, Mode::Train { .. });
        let mut caches: Vec<BlockCache<F>> = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::with_capacity(self.blocks.len());
        for i in 0..4 {
            let x = if i == 0 { input.view() } else { caches[i - 1].out.view() };
            let (c, st) = self.blocks[i].activate(self.blocks[i].affine(x), train);
            caches.push(c);
            stats.push(st);
        }
        let (pooled, pool_argmax) = max_pool(&caches[3].out, batch, points);
        for i in 4..6 {
            let x = if i == 4 { pooled.view() } else { caches[i - 1].out.view() };
            let (c, st) = self.blocks[i].activate(self.blocks[i].affine(x), train);
            caches.push(c);
            stats.push(st);
        }
        let dropout = match mode {
            Mode::Train { dropout_seed } => Some(dropout_mask::<F>((batch, 32), dropout_seed)),
            Mode::Eval => None,
        };
        let logits = match &dropout {
            Some(mask) => self.blocks[6].affine((&caches[5].out * mask).view()),
            None => self.blocks[6].affine(caches[5].out.view()),
        };
        let (c, st) = self.blocks[6].activate(logits, train);
        let output = c.out.mapv(|v| (F::one() + (-v).exp()).recip());
        caches.push(c);
        stats.push(st);
        let tape = Tape {
            batch,
            points,
            train,
            input,
            caches,
            pooled,
            pool_argmax,
            dropout_mask: dropout,
            output,
            consumed: false,
        };
        Ok((tape, stats))
    }

    /// Occupancy estimates `B x 3` and the tape for the backward pass.
    pub fn forward(&mut self, x: ArrayView3<'_, F>, mode: Mode) -> Result<(Array2<F>, Tape<F>)> {
        let (tape, stats) = self.run(x, mode)?;
        for (block, st) in self.blocks.iter_mut().zip(stats) {
            if let Some((mean, var)) = st {
                block.update_running(&mean, &var);
            }
        }
        Ok((tape.output.clone(), tape))
    }

    pub fn predict(&self, x: ArrayView3<'_, F>) -> Result<Array2<F>> {
        Ok(self.run(x, Mode::Eval)?.0.output)
    }

    pub fn backward(&self, tape: &mut Tape<F>, d_out: ArrayView2<'_, F>) -> Result<Gradients<F>> {
        if d_out.dim() != (tape.batch, 3) {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match the forward pass",
                d_out.dim()
            )));
        }
        tape.consume()?;
        let c = &tape.caches;
        let mask = tape.dropout_mask.as_ref().expect("training pass has a dropout mask");
        let d = Array2::from_shape_fn(d_out.raw_dim(), |(b, j)| {
            let y = tape.output[[b, j]];
            d_out[[b, j]] * y * (F::one() - y)
        });
        let mut grads: Vec<Option<BlockGrads<F>>> = (0..self.blocks.len()).map(|_| None).collect();

        let (dh, norm) = self.blocks[6].deactivate(&c[6], d)?;
        let dropped = &c[5].out * mask;
        grads[6] = Some(self.blocks[6].grads(dropped.view(), &dh, norm));
        let mut d = dh.dot(&self.blocks[6].weight.t()) * mask;

        for i in (0..6).rev() {
            let (dh, norm) = self.blocks[i].deactivate(&c[i], d)?;
            let input = match i {
                0 => tape.input.view(),
                4 => tape.pooled.view(),
                _ => c[i - 1].out.view(),
            };
            grads[i] = Some(self.blocks[i].grads(input, &dh, norm));
            d = dh.dot(&self.blocks[i].weight.t());
            if i == 4 {
                d = max_pool_backward(&d, &tape.pool_argmax, tape.batch * tape.points);
            }
        }
        Ok(flatten_grads(grads))
    }
}

impl<F: Scalar> Network<F> for RegressionNet<F> {
    fn parameters(&self) -> Vec<&[F]> {
        self.blocks.iter().flat_map(Block::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [F]> {
        self.blocks.iter_mut().flat_map(Block::parameters_mut).collect()
    }

    fn running_stats(&self) -> Vec<&[F]> {
        self.blocks.iter().flat_map(Block::running_stats).collect()
    }

    fn running_stats_mut(&mut self) -> Vec<&mut [F]> {
        self.blocks.iter_mut().flat_map(Block::running_stats_mut).collect()
    }
}

/// Learning rate for a zero-based epoch: the base rate, divided by ten from
/// epoch 50 on.
pub fn scheduled_learning_rate(base: f64, epoch: usize) -> f64 {
    if epoch >= 50 {
        base * 0.1
    } else {
        base
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<N: Network<F> + ?Sized>(&mut self, net: &mut N, grads: &Gradients<F>) -> Result<()> {
        let params = net.parameters_mut();
        if params.len() != grads.tensors.len()
            || params.iter().zip(&grads.tensors).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::Contract("gradients do not match the network parameters".into()));
        }
        if self.first.is_empty() {
            self.first = grads.tensors.iter().map(|g| vec![F::zero(); g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(t));
        let c2 = F::of(1.0 - self.beta2.powi(t));
        let lr = F::of(self.learning_rate);
        let eps = F::of(self.eps);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
