use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{matmul, Matrix, SeededRng};

/// How a backend reports the duration of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timing {
    /// The caller's wall clock around the run is authoritative.
    WallClock,
    /// The run reports its own exact duration in nanoseconds.
    Virtual(f64),
}

/// One square-weight × dense-input multiplication per `run`.
pub trait MatmulBackend: Send {
    fn id(&self) -> String;

    /// Called once per grid point before any run, outside the timed region.
    fn prepare(&mut self, _dim: usize, _batch: usize) -> Result<()> {
        Ok(())
    }

    fn run(&mut self, dim: usize, batch: usize) -> Result<Timing>;
}

/// Times the crate's own dense `matmul` of `dim×dim` by `dim×batch`.
#[derive(Debug)]
pub struct NativeBackend {
    rng: SeededRng,
    operands: Option<(usize, usize, Matrix, Matrix)>,
}

impl NativeBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SeededRng::new(seed),
            operands: None,
        }
    }
}

impl MatmulBackend for NativeBackend {
    fn id(&self) -> String {
        format!("native-f64-{}", std::env::consts::ARCH)
    }

    fn prepare(&mut self, dim: usize, batch: usize) -> Result<()> {
        let mut fill = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| self.rng.uniform(-1.0, 1.0)).collect();
            Matrix::from_vec(r, c, data)
        };
        let a = fill(dim, dim)?;
        let b = fill(dim, batch)?;
        self.operands = Some((dim, batch, a, b));
        Ok(())
    }

    fn run(&mut self, dim: usize, batch: usize) -> Result<Timing> {
        if !matches!(&self.operands, Some((d, b, _, _)) if *d == dim && *b == batch) {
            self.prepare(dim, batch)?;
        }
        let (_, _, a, b) = self.operands.as_ref().expect("operands prepared");
        black_box(matmul(black_box(a), black_box(b))?);
        Ok(Timing::WallClock)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ramp {
    /// Latency falls toward each multiple of the period, then jumps up just
    /// past it (padding-style).
    #[default]
    Falling,
    /// Latency rises from each multiple of the period and drops back at the
    /// next one.
    Rising,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Report the closed-form duration without waiting; exact and
    /// deterministic.
    #[default]
    Virtual,
    /// Spin for the closed-form duration and let the wall clock measure it.
    BusyWait,
}

/// Closed-form latency curve
/// `L(d) = base + slope·d + jump·ramp(d mod period) + noise(seed, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCurveSpec {
    pub base_ns: f64,
    #[serde(default)]
    pub slope_ns: f64,
    #[serde(default)]
    pub jump_ns: f64,
    #[serde(default = "one")]
    pub period: usize,
    #[serde(default)]
    pub ramp: Ramp,
    /// Deterministic per-dimension offset drawn from `[0, noise_ns)`.
    #[serde(default)]
    pub noise_ns: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clock: Clock,
}

fn one() -> usize {
    1
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SyntheticCurveSpec {
    pub fn constant(ns: f64) -> Self {
        Self {
            base_ns: ns,
            slope_ns: 0.0,
            jump_ns: 0.0,
            period: 1,
            ramp: Ramp::Falling,
            noise_ns: 0.0,
            seed: 0,
            clock: Clock::Virtual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.base_ns, self.slope_ns, self.jump_ns, self.noise_ns]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.base_ns <= 0.0 || self.jump_ns < 0.0 || self.noise_ns < 0.0 || self.period == 0 {
            return Err(Error::config(format!(
                "synthetic curve needs finite base_ns > 0, jump_ns ≥ 0, noise_ns ≥ 0, period ≥ 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Closed-form latency in nanoseconds. May be non-positive for a
    /// negative slope far enough out; [`SyntheticBackend`] rejects that.
    pub fn latency_ns(&self, dim: usize) -> f64 {
        let p = self.period;
        let phase = match self.ramp {
            Ramp::Falling => ((p - dim % p) % p) as f64 / p as f64,
            Ramp::Rising => (dim % p) as f64 / p as f64,
        };
        let noise = if self.noise_ns > 0.0 {
            let h = splitmix(self.seed ^ splitmix(dim as u64));
            self.noise_ns * ((h >> 11) as f64 / (1u64 << 53) as f64)
        } else {
            0.0
        };
        self.base_ns + self.slope_ns * dim as f64 + self.jump_ns * phase + noise
    }
}

/// Backend whose runs last exactly the curve's latency.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    spec: SyntheticCurveSpec,
}

impl SyntheticBackend {
    pub fn new(spec: SyntheticCurveSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SyntheticCurveSpec {
        &self.spec
    }
}

impl MatmulBackend for SyntheticBackend {
    fn id(&self) -> String {
        match self.spec.clock {
            Clock::Virtual => "synthetic-virtual".into(),
            Clock::BusyWait => "synthetic-busywait".into(),
        }
    }

    fn run(&mut self, dim: usize, _batch: usize) -> Result<Timing> {
        let ns = self.spec.latency_ns(dim);
        if !(ns > 0.0) {
            return Err(Error::Measurement {
                dim,
                message: format!("synthetic curve gives non-positive latency {ns} ns"),
            });
        }
        match self.spec.clock {
            Clock::Virtual => Ok(Timing::Virtual(ns)),
            Clock::BusyWait => {
                let until = Duration::from_nanos(ns.round() as u64);
                let start = Instant::now();
                while start.elapsed() < until {
                    std::hint::spin_loop();
                }
                Ok(Timing::WallClock)
            }
        }
    }
}
