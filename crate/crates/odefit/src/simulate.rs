//! Synthetic observation datasets: draw `y_i = x(t_i) + eps_i` from a system
//! and read/write the plain-text dataset format.
//!
//! Noise is independent zero-mean Gaussian with a per-coordinate standard
//! deviation (diagonal covariance). All draws come from a seeded ChaCha8
//! generator, so a dataset is a pure function of its inputs and seed.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{self, format_f64, OdeSystem, TimeGrid};

/// Per-coordinate observation-noise standard deviations (diagonal covariance).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    sigmas: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidInput(
                "noise standard deviations must be finite and >= 0".into(),
            ));
        }
        Ok(Self { sigmas })
    }

    /// The same standard deviation for every coordinate.
    pub fn isotropic(state_dim: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![sigma; state_dim])
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Generating configuration embedded in benchmark datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub sigma: Vec<f64>,
    pub seed: Option<u64>,
}

/// Noisy observations on a time grid, optionally carrying the generating truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    grid: TimeGrid,
    observations: Vec<Vec<f64>>,
    truth: Option<Truth>,
}

impl Dataset {
    pub fn new(grid: TimeGrid, observations: Vec<Vec<f64>>, truth: Option<Truth>) -> Result<Self> {
        if observations.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                what: "observations",
                expected: grid.len(),
                got: observations.len(),
            });
        }
        let p = observations.first().map_or(0, Vec::len);
        if p == 0 || observations.iter().any(|y| y.len() != p) {
            return Err(Error::InvalidInput(
                "observations must be non-empty and rectangular".into(),
            ));
        }
        if let Some(t) = &truth {
            if t.x0.len() != p || t.sigma.len() != p {
                return Err(Error::InvalidInput(
                    "truth block dimensions do not match data".into(),
                ));
            }
        }
        Ok(Self { grid, observations, truth })
    }

    /// A dataset with a grid but no observations. The likelihood of such a
    /// dataset is identically one, which turns the posterior samplers into
    /// prior samplers.
    pub fn without_observations(grid: TimeGrid) -> Self {
        Self { grid, observations: Vec::new(), truth: None }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.observations
    }

    /// Number of observation rows (zero for a prior-only dataset).
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }
}

/// Simulates a dataset: integrate the system (RK4 with the default substep
/// count), then add per-coordinate Gaussian noise drawn from `seed`.
pub fn generate(
    sys: &OdeSystem,
    theta: &[f64],
    x0: &[f64],
    grid: &TimeGrid,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset> {
    if noise.sigmas.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "noise sigmas",
            expected: sys.state_dim(),
            got: noise.sigmas.len(),
        });
    }
    let trajectory = models::integrate(sys, x0, grid, theta, models::DEFAULT_REFINE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observations = trajectory
        .states()
        .iter()
        .map(|x| {
            x.iter()
                .zip(&noise.sigmas)
                .map(|(&xv, &s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    xv + s * z
                })
                .collect()
        })
        .collect();
    Dataset::new(
        grid.clone(),
        observations,
        Some(Truth {
            theta: theta.to_vec(),
            x0: x0.to_vec(),
            sigma: noise.sigmas.clone(),
            seed: Some(seed),
        }),
    )
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(",")
}

/// Serializes a dataset: optional `# truth_*` comment lines, a `t,y1,...,yp`
/// header, then one row per grid point with 17 significant digits.
pub fn to_string(ds: &Dataset) -> String {
    let mut out = String::new();
    if let Some(t) = ds.truth() {
        out.push_str(&format!("# truth_theta={}\n", join(&t.theta)));
        out.push_str(&format!("# truth_x0={}\n", join(&t.x0)));
        out.push_str(&format!("# truth_sigma={}\n", join(&t.sigma)));
        if let Some(seed) = t.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
    }
    out.push('t');
    for c in 1..=ds.state_dim() {
        out.push_str(&format!(",y{c}"));
    }
    out.push('\n');
    for (t, y) in ds.grid.points().iter().zip(&ds.observations) {
        out.push_str(&format_f64(*t));
        for v in y {
            out.push(',');
            out.push_str(&format_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_string(ds))?;
    Ok(())
}

fn parse_values(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(',')
        .map(|tok| {
            tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse '{}' as a number", tok.trim()),
            })
        })
        .collect()
}

/// Parses the dataset format produced by [`to_string`].
pub fn from_str(text: &str) -> Result<Dataset> {
    let mut truth_theta = None;
    let mut truth_x0 = None;
    let mut truth_sigma = None;
    let mut truth_seed = None;
    let mut header_seen = false;
    let mut width = 0usize;
    let mut times = Vec::new();
    let mut observations = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some((key, value)) = comment.split_once('=') {
                match key.trim() {
                    "truth_theta" => truth_theta = Some(parse_values(value, line_no)?),
                    "truth_x0" => truth_x0 = Some(parse_values(value, line_no)?),
                    "truth_sigma" => truth_sigma = Some(parse_values(value, line_no)?),
                    "seed" => {
                        truth_seed =
                            Some(value.trim().parse::<u64>().map_err(|_| Error::Parse {
                                line: line_no,
                                message: format!("cannot parse seed '{}'", value.trim()),
                            })?)
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.first() != Some(&"t") || cols.len() < 2 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected header 't,y1,...,yp'".into(),
                });
            }
            width = cols.len();
            header_seen = true;
            continue;
        }
        let values = parse_values(line, line_no)?;
        if values.len() != width {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} columns, got {}", width, values.len()),
            });
        }
        times.push(values[0]);
        observations.push(values[1..].to_vec());
    }

    if !header_seen {
        return Err(Error::Parse { line: 1, message: "missing header".into() });
    }
    if times.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "dataset needs at least 2 observations, got {}",
            times.len()
        )));
    }
    let grid = TimeGrid::new(times)?;
    let truth = match (truth_theta, truth_x0, truth_sigma) {
        (Some(theta), Some(x0), Some(sigma)) => Some(Truth { theta, x0, sigma, seed: truth_seed }),
        _ => None,
    };
    Dataset::new(grid, observations, truth)
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    from_str(&fs::read_to_string(path)?)
}

/// The benchmark configuration used throughout: FitzHugh-Nagumo with
/// theta = (0.2, 0.2, 3), x0 = (-1, 1), sigma = 0.5 per coordinate, and
/// n = 401 observations equally spaced on [0, 20].
pub fn fhn_benchmark(seed: u64) -> Dataset {
    let sys = OdeSystem::fitzhugh_nagumo();
    let grid = TimeGrid::linspace(0.0, 20.0, 401).expect("static grid");
    let noise = NoiseSpec::isotropic(2, 0.5).expect("static noise");
    generate(&sys, &[0.2, 0.2, 3.0], &[-1.0, 1.0], &grid, &noise, seed)
        .expect("benchmark configuration integrates")
}
