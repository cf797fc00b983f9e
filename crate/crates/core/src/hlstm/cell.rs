use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Activation, MaskedLinear, Matrix, SeededRng};

/// The four control gates, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Forget,
    Input,
    Output,
    Update,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [
        GateKind::Forget,
        GateKind::Input,
        GateKind::Output,
        GateKind::Update,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            GateKind::Forget => "f",
            GateKind::Input => "i",
            GateKind::Output => "o",
            GateKind::Update => "g",
        }
    }

    /// σ for f/i/o, tanh for the update vector g.
    pub fn activation(self) -> Activation {
        match self {
            GateKind::Update => Activation::Tanh,
            _ => Activation::Sigmoid,
        }
    }
}

/// One control gate: an optional hidden layer `H` followed by the output
/// layer `O`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub hidden: Option<MaskedLinear>,
    pub output: MaskedLinear,
}

/// Allocated widths of a cell. Pruning never changes these; it deactivates
/// rows and columns inside them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub d_x: usize,
    pub d_s: usize,
    pub d_h: usize,
    /// 0 = plain LSTM gates, 1 = one hidden layer per gate.
    pub hidden_depth: u8,
}

impl CellDims {
    pub fn gate_input(&self) -> usize {
        self.d_x + self.d_s
    }
}

/// H-LSTM cell: `z = [x, h]`, each gate is `act_out(O · act_h(H · z))`,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlstmCell {
    dims: CellDims,
    hidden_activation: Activation,
    gates: Vec<Gate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    /// `d_s × batch`
    pub h: Matrix,
    /// `d_s × batch`
    pub c: Matrix,
}

impl CellState {
    pub fn zeros(d_s: usize, batch: usize) -> Self {
        Self {
            h: Matrix::zeros(d_s, batch),
            c: Matrix::zeros(d_s, batch),
        }
    }
}

/// Inverted dropout on gate hidden-layer outputs.
pub struct Dropout<'a> {
    pub ratio: f64,
    pub rng: &'a mut SeededRng,
}

#[derive(Debug)]
struct GateCache {
    hidden_pre: Option<Matrix>,
    hidden_act: Option<Matrix>,
    drop_scale: Option<Matrix>,
    /// Input that fed the output layer (dropped hidden output, or `z`).
    output_in: Option<Matrix>,
    value: Matrix,
}

/// Everything one forward step needs for its backward step. Consumed by
/// [`HlstmCell::backward`], so a cache cannot be replayed.
#[derive(Debug)]
pub struct StepCache {
    z: Matrix,
    c_prev: Matrix,
    gates: Vec<GateCache>,
    tanh_c: Matrix,
}

impl StepCache {
    pub fn gate_value(&self, gate: GateKind) -> &Matrix {
        &self.gates[gate.index()].value
    }
}

impl HlstmCell {
    /// Zero weights, dense masks.
    pub fn zeros(dims: CellDims, hidden_activation: Activation) -> Result<Self> {
        if dims.d_s == 0 || dims.d_x == 0 || (dims.hidden_depth == 1 && dims.d_h == 0) {
            return Err(Error::config(format!("cell dims must be positive: {dims:?}")));
        }
        if dims.hidden_depth > 1 {
            return Err(Error::config("hidden_depth must be 0 or 1"));
        }
        let gates = GateKind::ALL
            .iter()
            .map(|_| {
                if dims.hidden_depth == 1 {
                    Gate {
                        hidden: Some(MaskedLinear::new(dims.d_h, dims.gate_input())),
                        output: MaskedLinear::new(dims.d_s, dims.d_h),
                    }
                } else {
                    Gate {
                        hidden: None,
                        output: MaskedLinear::new(dims.d_s, dims.gate_input()),
                    }
                }
            })
            .collect();
        Ok(Self {
            dims,
            hidden_activation,
            gates,
        })
    }

    pub fn dims(&self) -> CellDims {
        self.dims
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn gate(&self, kind: GateKind) -> &Gate {
        &self.gates[kind.index()]
    }

    pub fn gate_mut(&mut self, kind: GateKind) -> &mut Gate {
        &mut self.gates[kind.index()]
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn gates_mut(&mut self) -> &mut [Gate] {
        &mut self.gates
    }

    pub fn forward(
        &self,
        x: &Matrix,
        prev: &CellState,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(CellState, StepCache)> {
        if x.rows() != self.dims.d_x
            || prev.h.rows() != self.dims.d_s
            || prev.c.shape() != prev.h.shape()
            || x.cols() != prev.h.cols()
        {
            return Err(Error::Shape {
                op: "cell_forward",
                left: x.shape(),
                right: prev.h.shape(),
            });
        }
        let z = Matrix::vstack(x, &prev.h)?;
        let mut caches = Vec::with_capacity(4);
        for kind in GateKind::ALL {
            let gate = &self.gates[kind.index()];
            let (hidden_pre, hidden_act, drop_scale, output_in) = match &gate.hidden {
                Some(h) => {
                    let pre = h.forward(&z)?;
                    let act = self.hidden_activation.forward(&pre);
                    let (scale, out) = match dropout.as_mut() {
                        Some(d) if d.ratio > 0.0 => {
                            let keep = 1.0 - d.ratio;
                            let mut s = Matrix::zeros(act.rows(), act.cols());
                            for v in s.as_mut_slice() {
                                if d.rng.bernoulli(keep) {
                                    *v = 1.0 / keep;
                                }
                            }
                            let out = act.hadamard(&s)?;
                            (Some(s), out)
                        }
                        _ => (None, act.clone()),
                    };
                    (Some(pre), Some(act), scale, out)
                }
                None => (None, None, None, z.clone()),
            };
            let pre = gate.output.forward(&output_in)?;
            let value = kind.activation().forward(&pre);
            caches.push(GateCache {
                hidden_pre,
                hidden_act,
                drop_scale,
                output_in: gate.hidden.as_ref().map(|_| output_in),
                value,
            });
        }
        let f = &caches[GateKind::Forget.index()].value;
        let i = &caches[GateKind::Input.index()].value;
        let o = &caches[GateKind::Output.index()].value;
        let g = &caches[GateKind::Update.index()].value;
        let mut c = Matrix::zeros(prev.c.rows(), prev.c.cols());
        let mut h = Matrix::zeros(prev.c.rows(), prev.c.cols());
        let mut tanh_c = Matrix::zeros(prev.c.rows(), prev.c.cols());
        for idx in 0..c.as_slice().len() {
            let cv = f.as_slice()[idx] * prev.c.as_slice()[idx] + i.as_slice()[idx] * g.as_slice()[idx];
            let tc = cv.tanh();
            c.as_mut_slice()[idx] = cv;
            tanh_c.as_mut_slice()[idx] = tc;
            h.as_mut_slice()[idx] = o.as_slice()[idx] * tc;
        }
        if !c.is_finite() || !h.is_finite() {
            return Err(Error::non_finite("cell state after forward step"));
        }
        Ok((
            CellState { h, c },
            StepCache {
                z,
                c_prev: prev.c.clone(),
                gates: caches,
                tanh_c,
            },
        ))
    }

    /// Reverse of [`HlstmCell::forward`]. Accumulates gradients into all gate
    /// layers and returns `(dx, d_prev)`.
    pub fn backward(
        &mut self,
        cache: StepCache,
        dh: &Matrix,
        dc: &Matrix,
    ) -> Result<(Matrix, CellState)> {
        if dh.shape() != cache.tanh_c.shape() || dc.shape() != cache.tanh_c.shape() {
            return Err(Error::Shape {
                op: "cell_backward",
                left: dh.shape(),
                right: cache.tanh_c.shape(),
            });
        }
        let n = dh.as_slice().len();
        let (rows, cols) = dh.shape();
        let f = cache.gates[GateKind::Forget.index()].value.as_slice();
        let i = cache.gates[GateKind::Input.index()].value.as_slice();
        let o = cache.gates[GateKind::Output.index()].value.as_slice();
        let g = cache.gates[GateKind::Update.index()].value.as_slice();
        let tc = cache.tanh_c.as_slice();
        let cp = cache.c_prev.as_slice();

        let mut d_gate = [
            Matrix::zeros(rows, cols),
            Matrix::zeros(rows, cols),
            Matrix::zeros(rows, cols),
            Matrix::zeros(rows, cols),
        ];
        let mut dc_prev = Matrix::zeros(rows, cols);
        for k in 0..n {
            let dhk = dh.as_slice()[k];
            let dct = dc.as_slice()[k] + dhk * o[k] * (1.0 - tc[k] * tc[k]);
            // Gradients w.r.t. gate pre-activations.
            d_gate[0].as_mut_slice()[k] = dct * cp[k] * f[k] * (1.0 - f[k]);
            d_gate[1].as_mut_slice()[k] = dct * g[k] * i[k] * (1.0 - i[k]);
            d_gate[2].as_mut_slice()[k] = dhk * tc[k] * o[k] * (1.0 - o[k]);
            d_gate[3].as_mut_slice()[k] = dct * i[k] * (1.0 - g[k] * g[k]);
            dc_prev.as_mut_slice()[k] = dct * f[k];
        }

        let mut dz = Matrix::zeros(cache.z.rows(), cache.z.cols());
        let hidden_activation = self.hidden_activation;
        for (gate, (gc, d_pre)) in self
            .gates
            .iter_mut()
            .zip(cache.gates.into_iter().zip(d_gate.iter()))
        {
            match gate.hidden.as_mut() {
                Some(hidden) => {
                    let out_in = gc.output_in.as_ref().expect("hidden gate caches its input");
                    let d_out_in = gate.output.backward(out_in, d_pre)?;
                    let d_act = match &gc.drop_scale {
                        Some(s) => d_out_in.hadamard(s)?,
                        None => d_out_in,
                    };
                    let pre = gc.hidden_pre.as_ref().expect("hidden pre-activation cached");
                    let act = gc.hidden_act.as_ref().expect("hidden activation cached");
                    let d_hpre = hidden_activation.backward(pre, act, &d_act);
                    dz.add_assign(&hidden.backward(&cache.z, &d_hpre)?)?;
                }
                None => {
                    dz.add_assign(&gate.output.backward(&cache.z, d_pre)?)?;
                }
            }
        }
        let (dx, dh_prev) = dz.split_rows(self.dims.d_x);
        Ok((
            dx,
            CellState {
                h: dh_prev,
                c: dc_prev,
            },
        ))
    }

    /// `(label, layer)` pairs for every masked layer, hidden before output.
    pub fn layers(&self) -> Vec<(String, &MaskedLinear)> {
        let mut out = Vec::with_capacity(8);
        for kind in GateKind::ALL {
            let gate = &self.gates[kind.index()];
            if let Some(h) = &gate.hidden {
                out.push((format!("{}.hidden", kind.label()), h));
            }
            out.push((format!("{}.output", kind.label()), &gate.output));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut MaskedLinear> {
        let mut out = Vec::with_capacity(8);
        for gate in self.gates.iter_mut() {
            if let Some(h) = gate.hidden.as_mut() {
                out.push(h);
            }
            out.push(&mut gate.output);
        }
        out
    }
}
