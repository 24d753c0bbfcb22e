//! Nonstationary single-pass data streams with held-out per-task eval sets:
//! the synthetic linear-regression task sequence, class-incremental splits of
//! a labeled dataset, and a domain-incremental rotation stream. Also the IDX
//! reader for MNIST-format files and a Gaussian-blobs generator so everything
//! runs without downloads.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::Example;
use crate::linalg::{cholesky, Matrix};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("need {needed} classes but dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("input dim {dim} is not a square image")]
    NotSquareInput { dim: usize },
    #[error("idx read: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad idx magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { got: u32, expected: u32 },
    #[error("idx payload truncated")]
    Truncated,
}

/// One task of the stream: training pairs, a disjoint eval set, and either a
/// class set (class-incremental) or a domain parameter (domain-incremental).
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub class_set: Option<BTreeSet<usize>>,
    pub domain_param: Option<f64>,
}

/// A minibatch from the stream. `is_first_of_task` is diagnostic only and is
/// never consumed by strategies.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub examples: Vec<Example>,
    pub global_step: usize,
    pub is_first_of_task: bool,
}

/// In-memory labeled classification dataset.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parameters of the synthetic linear-regression stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStreamSpec {
    pub tasks: usize,
    pub samples_per_task: usize,
    pub eval_per_task: usize,
    pub input_dim: usize,
    pub noise_std: f64,
}

impl Default for LinearStreamSpec {
    fn default() -> Self {
        // 10 tasks of 1000 samples, 10 inputs, one output; observation noise
        // N(0, 0.01) (std 0.1) keeps the optimum well-defined but nontrivial
        LinearStreamSpec {
            tasks: 10,
            samples_per_task: 1000,
            eval_per_task: 200,
            input_dim: 10,
            noise_std: 0.1,
        }
    }
}

/// Ground truth of one generated linear task, exposed for oracle checks.
#[derive(Debug, Clone)]
pub struct LinearTaskTruth {
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Random task sequence of linear-regression problems. Each task draws its
/// own input mean, SPD covariance (eigenvalues log-uniform in [0.1, 10]),
/// and true weight vector; targets are `x·w + ε`.
pub fn gen_linear_stream(spec: &LinearStreamSpec, seed: u64) -> (Vec<TaskSpec>, Vec<LinearTaskTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d = spec.input_dim;
    let mut tasks = Vec::with_capacity(spec.tasks);
    let mut truths = Vec::with_capacity(spec.tasks);
    for task_id in 0..spec.tasks {
        let mean: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let cov = random_covariance(d, &mut rng);
        let chol = cholesky(&cov).expect("generated covariance is SPD");
        let w_true: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();

        let draw = |rng: &mut ChaCha8Rng| -> Example {
            let z: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
            let mut x = mean.clone();
            for i in 0..d {
                for j in 0..=i {
                    x[i] += chol[(i, j)] * z[j];
                }
            }
            let y: f64 = x.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>()
                + spec.noise_std * normal.sample(rng);
            Example::regression(x, vec![y])
        };

        let train: Vec<Example> = (0..spec.samples_per_task).map(|_| draw(&mut rng)).collect();
        let eval: Vec<Example> = (0..spec.eval_per_task).map(|_| draw(&mut rng)).collect();
        tasks.push(TaskSpec {
            task_id,
            train,
            eval,
            class_set: None,
            domain_param: None,
        });
        truths.push(LinearTaskTruth {
            weights: w_true,
            mean,
        });
    }
    (tasks, truths)
}

/// SPD covariance with log-uniform eigenvalues in [0.1, 10] and a random
/// orthogonal eigenbasis.
fn random_covariance(d: usize, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    // random orthogonal basis by Gram-Schmidt on a Gaussian matrix
    let mut q = Matrix::zeros(d, d);
    for col in 0..d {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for prev in 0..col {
            let dot: f64 = (0..d).map(|i| v[i] * q[(i, prev)]).sum();
            for i in 0..d {
                v[i] -= dot * q[(i, prev)];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..d {
            q[(i, col)] = v[i] / norm;
        }
    }
    let eigs: Vec<f64> = (0..d)
        .map(|_| 10f64.powf(rng.gen_range(-1.0..1.0)))
        .collect();
    let mut scaled = q.clone();
    for col in 0..d {
        for i in 0..d {
            scaled[(i, col)] *= eigs[col];
        }
    }
    scaled.matmul(&q.transpose())
}

/// Gaussian-blobs classification dataset shaped like `side × side` images,
/// so the rotation stream and the class-incremental split both work on it.
pub fn gen_blobs(
    num_classes: usize,
    per_class: usize,
    side: usize,
    noise_std: f64,
    seed: u64,
) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let dim = side * side;
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut inputs = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            inputs.push(
                center
                    .iter()
                    .map(|m| m + noise_std * normal.sample(&mut rng))
                    .collect(),
            );
            labels.push(c);
        }
    }
    LabeledDataset {
        inputs,
        labels,
        num_classes,
    }
}

/// Partition classes in label order into consecutive tasks with a 90/10
/// train/eval split per class.
pub fn gen_class_incremental(
    dataset: &LabeledDataset,
    n_tasks: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<Vec<TaskSpec>, StreamError> {
    let needed = n_tasks * classes_per_task;
    if needed > dataset.num_classes {
        return Err(StreamError::InsufficientClasses {
            needed,
            available: dataset.num_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for task_id in 0..n_tasks {
        let classes: BTreeSet<usize> =
            (task_id * classes_per_task..(task_id + 1) * classes_per_task).collect();
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for &class in &classes {
            let mut idx = by_class[class].clone();
            idx.shuffle(&mut rng);
            let n_eval = (idx.len() / 10).max(1);
            let (eval_idx, train_idx) = idx.split_at(n_eval);
            for &i in train_idx {
                train.push(Example::class(dataset.inputs[i].clone(), class));
            }
            for &i in eval_idx {
                eval.push(Example::class(dataset.inputs[i].clone(), class));
            }
        }
        tasks.push(TaskSpec {
            task_id,
            train,
            eval,
            class_set: Some(classes),
            domain_param: None,
        });
    }
    Ok(tasks)
}

/// Nearest-neighbor rotation of a square image; pixels mapped from outside
/// the frame become 0. Nearest-neighbor keeps the result bit-reproducible.
pub fn rotate_image_nn(pixels: &[f64], side: usize, angle_rad: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_rad.sin_cos();
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            let y = r as f64 - c;
            let x = col as f64 - c;
            // inverse rotation back into the source frame
            let sy = cos * y + sin * x + c;
            let sx = -sin * y + cos * x + c;
            let sr = sy.round();
            let sc = sx.round();
            if sr >= 0.0 && sc >= 0.0 && (sr as usize) < side && (sc as usize) < side {
                out[r * side + col] = pixels[sr as usize * side + sc as usize];
            }
        }
    }
    out
}

/// Domain-incremental stream: task t rotates every image by
/// `t·max_angle/(n_tasks−1)` degrees; all tasks share the label set.
pub fn gen_rotation_stream(
    dataset: &LabeledDataset,
    n_tasks: usize,
    max_angle_deg: f64,
    seed: u64,
) -> Result<Vec<TaskSpec>, StreamError> {
    let dim = dataset.input_dim();
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(StreamError::NotSquareInput { dim });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // one split shared across tasks so class marginals are identical
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    let n_eval = (idx.len() / 10).max(1);
    let (eval_idx, train_idx) = idx.split_at(n_eval);

    let mut tasks = Vec::with_capacity(n_tasks);
    for task_id in 0..n_tasks {
        let angle_deg = if n_tasks <= 1 {
            0.0
        } else {
            task_id as f64 * max_angle_deg / (n_tasks as f64 - 1.0)
        };
        let angle = angle_deg.to_radians();
        let build = |indices: &[usize]| -> Vec<Example> {
            indices
                .iter()
                .map(|&i| {
                    Example::class(
                        rotate_image_nn(&dataset.inputs[i], side, angle),
                        dataset.labels[i],
                    )
                })
                .collect()
        };
        tasks.push(TaskSpec {
            task_id,
            train: build(train_idx),
            eval: build(eval_idx),
            class_set: None,
            domain_param: Some(angle_deg),
        });
    }
    Ok(tasks)
}

/// Single-pass minibatch iterator: tasks in order, examples shuffled within
/// each task, batches chunked across task boundaries.
pub struct StreamIter {
    examples: Vec<Example>,
    task_starts: Vec<usize>, // example index where each task begins
    batch_size: usize,
    cursor: usize,
    step: usize,
    tasks_started: usize,
}

impl StreamIter {
    pub fn new(tasks: &[TaskSpec], batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut examples = Vec::new();
        let mut task_starts = Vec::with_capacity(tasks.len());
        for task in tasks {
            task_starts.push(examples.len());
            let mut shuffled = task.train.clone();
            shuffled.shuffle(&mut rng);
            examples.extend(shuffled);
        }
        StreamIter {
            examples,
            task_starts,
            batch_size,
            cursor: 0,
            step: 0,
            tasks_started: 0,
        }
    }

    /// Total number of batches this iterator will yield.
    pub fn num_batches(&self) -> usize {
        self.examples.len().div_ceil(self.batch_size)
    }

    /// Tasks whose training data has appeared so far (harness bookkeeping;
    /// strategies never see this).
    pub fn tasks_started(&self) -> usize {
        self.tasks_started
    }
}

impl Iterator for StreamIter {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        if self.cursor >= self.examples.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.examples.len());
        let is_first_of_task = self
            .task_starts
            .iter()
            .any(|&s| s >= self.cursor && s < end);
        self.tasks_started = self
            .task_starts
            .iter()
            .take_while(|&&s| s < end)
            .count();
        let batch = StreamBatch {
            examples: self.examples[self.cursor..end].to_vec(),
            global_step: self.step,
            is_first_of_task,
        };
        self.cursor = end;
        self.step += 1;
        Some(batch)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_reader(path: &Path) -> Result<Box<dyn Read>, StreamError> {
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::read::GzDecoder::new(
            std::io::BufReader::new(file),
        )))
    } else {
        Ok(Box::new(std::io::BufReader::new(file)))
    }
}

fn read_u32_be(r: &mut dyn Read) -> Result<u32, StreamError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| StreamError::Truncated)?;
    Ok(u32::from_be_bytes(buf))
}

/// Read an IDX image file (magic 0x00000803, big-endian dims, uint8 pixels),
/// normalizing pixels to [0, 1]. Transparently decompresses `.gz`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize), StreamError> {
    let mut r = idx_reader(path)?;
    let magic = read_u32_be(r.as_mut())?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(StreamError::BadMagic {
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(r.as_mut())? as usize;
    let rows = read_u32_be(r.as_mut())? as usize;
    let cols = read_u32_be(r.as_mut())? as usize;
    let mut payload = vec![0u8; count * rows * cols];
    r.read_exact(&mut payload).map_err(|_| StreamError::Truncated)?;
    let images = payload
        .chunks_exact(rows * cols)
        .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    Ok((images, rows, cols))
}

/// Read an IDX label file (magic 0x00000801).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>, StreamError> {
    let mut r = idx_reader(path)?;
    let magic = read_u32_be(r.as_mut())?;
    if magic != IDX_LABELS_MAGIC {
        return Err(StreamError::BadMagic {
            got: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32_be(r.as_mut())? as usize;
    let mut payload = vec![0u8; count];
    r.read_exact(&mut payload).map_err(|_| StreamError::Truncated)?;
    Ok(payload.into_iter().map(|b| b as usize).collect())
}

/// Load the MNIST training split from a directory holding the standard IDX
/// files (optionally gzipped).
pub fn load_mnist_train(dir: &Path) -> Result<LabeledDataset, StreamError> {
    let pick = |base: &str| -> Result<std::path::PathBuf, StreamError> {
        let plain = dir.join(base);
        if plain.exists() {
            return Ok(plain);
        }
        let gz = dir.join(format!("{base}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        Err(StreamError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} (or .gz) not found in {}", base, dir.display()),
        )))
    };
    let (inputs, _, _) = read_idx_images(&pick("train-images-idx3-ubyte")?)?;
    let labels = read_idx_labels(&pick("train-labels-idx1-ubyte")?)?;
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(LabeledDataset {
        inputs,
        labels,
        num_classes,
    })
}
