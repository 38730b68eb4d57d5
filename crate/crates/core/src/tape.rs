//! Reverse-mode gradient engine: an explicit tape of primitive applications.
//!
//! Forward calls append nodes holding the computed value plus whatever the
//! adjoint needs; `backward` seeds the scalar loss with 1.0 and sweeps the
//! tape in reverse creation order, accumulating gradients (summing over
//! fan-out) into every node that requires them. Everything is deterministic:
//! fixed loop orders, no threading.

use crate::error::{Error, Result};
use crate::metrics::{ncc_stats, NccStats};
use crate::ops;
use crate::resampler::sample_info;
use crate::tensor::Tensor;
use crate::transformer::{dvf_kernel_bwd, dvf_kernel_fwd, SplineOrder};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// How a 2x downsampling layer reduces resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleKind {
    AveragePool,
    MaxPool,
    StridedConv,
}

enum Op {
    Leaf,
    Conv2d { input: ValueId, kernel: ValueId, bias: ValueId, stride: usize },
    Conv1x1 { input: ValueId, kernel: ValueId, bias: ValueId },
    AvgPool { input: ValueId },
    MaxPool { input: ValueId, argmax: Vec<usize> },
    BatchNorm { input: ValueId, scale: ValueId, shift: ValueId, train: bool, xhat: Vec<f64>, inv_std: Vec<f64> },
    Elu { input: ValueId },
    GridToDvf { grid: ValueId, h: usize, w: usize, spacing_y: f64, spacing_x: f64, order: SplineOrder },
    Warp { moving: ValueId, dvf: ValueId },
    NccLoss { fixed: ValueId, warped: ValueId, pairs: Vec<NccStats> },
    Sum { input: ValueId },
    DotConst { input: ValueId, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected a rank-4 [n, c, h, w] tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call with respect to this value, if
    /// the value required gradients and was reachable from the loss.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node { value, requires_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    fn req(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_id(&self, id: ValueId, role: &str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("{role} value {} does not exist on this tape", id.0)));
        }
        Ok(())
    }

    /// 3x3 cross-correlation, zero padding 1, stride 1 or 2. Output spatial
    /// dims are ceil(h/stride) x ceil(w/stride).
    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, bias: ValueId, stride: usize) -> Result<ValueId> {
        self.check_id(input, "input")?;
        self.check_id(kernel, "kernel")?;
        self.check_id(bias, "bias")?;
        if !(stride == 1 || stride == 2) {
            return Err(Error::Usage(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (n, cin, h, w) = dims4(self.value(input).shape())?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 4 || kshape[2] != 3 || kshape[3] != 3 {
            return Err(Error::Usage(format!(
                "conv2d takes a [k, c, 3, 3] kernel (use conv1x1 for pointwise), got {kshape:?}"
            )));
        }
        if kshape[1] != cin {
            return Err(Error::Shape(format!(
                "kernel expects {} input channels, input has {cin}",
                kshape[1]
            )));
        }
        let kout = kshape[0];
        if self.value(bias).shape() != [kout] {
            return Err(Error::Shape(format!(
                "bias must be [{kout}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let out = ops::conv2d_fwd(
            self.value(input).data(),
            n,
            cin,
            h,
            w,
            self.value(kernel).data(),
            kout,
            self.value(bias).data(),
            stride,
        );
        let oh = ops::conv_out_dim(h, stride);
        let ow = ops::conv_out_dim(w, stride);
        let rg = self.req(input) || self.req(kernel) || self.req(bias);
        Ok(self.push(
            Tensor::new(vec![n, kout, oh, ow], out)?,
            rg,
            Op::Conv2d { input, kernel, bias, stride },
        ))
    }

    /// Per-pixel linear map across channels with a [k, c, 1, 1] kernel.
    pub fn conv1x1(&mut self, input: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check_id(input, "input")?;
        self.check_id(kernel, "kernel")?;
        self.check_id(bias, "bias")?;
        let (n, cin, h, w) = dims4(self.value(input).shape())?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 4 || kshape[2] != 1 || kshape[3] != 1 {
            return Err(Error::Usage(format!("conv1x1 takes a [k, c, 1, 1] kernel, got {kshape:?}")));
        }
        if kshape[1] != cin {
            return Err(Error::Shape(format!(
                "kernel expects {} input channels, input has {cin}",
                kshape[1]
            )));
        }
        let kout = kshape[0];
        if self.value(bias).shape() != [kout] {
            return Err(Error::Shape(format!(
                "bias must be [{kout}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let out = ops::conv1x1_fwd(
            self.value(input).data(),
            n,
            cin,
            h,
            w,
            self.value(kernel).data(),
            kout,
            self.value(bias).data(),
        );
        let rg = self.req(input) || self.req(kernel) || self.req(bias);
        Ok(self.push(
            Tensor::new(vec![n, kout, h, w], out)?,
            rg,
            Op::Conv1x1 { input, kernel, bias },
        ))
    }

    /// 2x downsampling. Pooling kinds take no kernel; `StridedConv` requires
    /// a (kernel, bias) pair and delegates to `conv2d` with stride 2.
    pub fn downsample2x(
        &mut self,
        input: ValueId,
        kind: DownsampleKind,
        kernel: Option<(ValueId, ValueId)>,
    ) -> Result<ValueId> {
        self.check_id(input, "input")?;
        match kind {
            DownsampleKind::AveragePool | DownsampleKind::MaxPool => {
                if kernel.is_some() {
                    return Err(Error::Usage("pooling downsampling takes no kernel".into()));
                }
                let (n, c, h, w) = dims4(self.value(input).shape())?;
                let oh = ops::conv_out_dim(h, 2);
                let ow = ops::conv_out_dim(w, 2);
                let rg = self.req(input);
                match kind {
                    DownsampleKind::AveragePool => {
                        let out = ops::avgpool_fwd(self.value(input).data(), n, c, h, w);
                        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, rg, Op::AvgPool { input }))
                    }
                    DownsampleKind::MaxPool => {
                        let (out, argmax) = ops::maxpool_fwd(self.value(input).data(), n, c, h, w);
                        Ok(self.push(
                            Tensor::new(vec![n, c, oh, ow], out)?,
                            rg,
                            Op::MaxPool { input, argmax },
                        ))
                    }
                    DownsampleKind::StridedConv => unreachable!(),
                }
            }
            DownsampleKind::StridedConv => {
                let Some((kw, kb)) = kernel else {
                    return Err(Error::Usage("strided-conv downsampling requires a kernel".into()));
                };
                self.conv2d(input, kw, kb, 2)
            }
        }
    }

    /// Batch normalization. Train mode normalizes with batch statistics over
    /// the (n, h, w) axes; Infer mode uses the supplied running statistics
    /// (initialization defaults mean 0 / var 1 make it well-defined before
    /// any update). With `track_stats` (Train only), returns the running
    /// statistics after an exponential-moving-average update; the caller owns
    /// applying them, keeping repeated forwards side-effect free.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: ValueId,
        scale: ValueId,
        shift: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        mode: BnMode,
        track_stats: bool,
    ) -> Result<(ValueId, Option<(Vec<f64>, Vec<f64>)>)> {
        self.check_id(input, "input")?;
        self.check_id(scale, "scale")?;
        self.check_id(shift, "shift")?;
        let (n, c, h, w) = dims4(self.value(input).shape())?;
        for (name, len) in [
            ("scale", self.value(scale).numel()),
            ("shift", self.value(shift).numel()),
            ("running mean", running_mean.len()),
            ("running var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::Shape(format!(
                    "batch norm {name} must have {c} entries (one per channel), got {len}"
                )));
            }
        }
        match mode {
            BnMode::Train => {
                if n * h * w < 2 {
                    return Err(Error::Usage(format!(
                        "train-mode batch norm needs at least 2 values per channel, got {}",
                        n * h * w
                    )));
                }
                let f = ops::bn_fwd_train(
                    self.value(input).data(),
                    n,
                    c,
                    h,
                    w,
                    self.value(scale).data(),
                    self.value(shift).data(),
                );
                let updated = track_stats.then(|| {
                    ops::bn_update_running(running_mean, running_var, &f.batch_mean, &f.batch_var)
                });
                let rg = self.req(input) || self.req(scale) || self.req(shift);
                let id = self.push(
                    Tensor::new(vec![n, c, h, w], f.out)?,
                    rg,
                    Op::BatchNorm { input, scale, shift, train: true, xhat: f.xhat, inv_std: f.inv_std },
                );
                Ok((id, updated))
            }
            BnMode::Infer => {
                if track_stats {
                    return Err(Error::Usage(
                        "running statistics only update in train mode".into(),
                    ));
                }
                let f = ops::bn_fwd_infer(
                    self.value(input).data(),
                    n,
                    c,
                    h,
                    w,
                    self.value(scale).data(),
                    self.value(shift).data(),
                    running_mean,
                    running_var,
                );
                let rg = self.req(input) || self.req(scale) || self.req(shift);
                let id = self.push(
                    Tensor::new(vec![n, c, h, w], f.out)?,
                    rg,
                    Op::BatchNorm { input, scale, shift, train: false, xhat: f.xhat, inv_std: f.inv_std },
                );
                Ok((id, None))
            }
        }
    }

    /// Elementwise ELU (alpha = 1).
    pub fn elu(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_id(input, "input")?;
        let out = ops::elu_fwd(self.value(input).data());
        let shape = self.value(input).shape().to_vec();
        let rg = self.req(input);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Elu { input }))
    }

    /// B-spline interpolation of a [n, 2, gh, gw] control grid to a dense
    /// [n, 2, h, w] displacement field.
    #[allow(clippy::too_many_arguments)]
    pub fn grid_to_dvf(
        &mut self,
        grid: ValueId,
        h: usize,
        w: usize,
        spacing_y: f64,
        spacing_x: f64,
        order: SplineOrder,
    ) -> Result<ValueId> {
        self.check_id(grid, "grid")?;
        if h == 0 || w == 0 {
            return Err(Error::Usage(format!("target dims must be positive, got {h}x{w}")));
        }
        if !(spacing_y > 0.0 && spacing_x > 0.0) {
            return Err(Error::Usage(format!(
                "grid spacing must be positive, got ({spacing_y}, {spacing_x})"
            )));
        }
        let (n, c, gh, gw) = dims4(self.value(grid).shape())?;
        if c != 2 {
            return Err(Error::Shape(format!("control grid needs 2 channels (dy, dx), got {c}")));
        }
        if gh < 2 || gw < 2 {
            return Err(Error::Config(format!(
                "control grid must be at least 2x2, got {gh}x{gw}"
            )));
        }
        let mut out = vec![0.0; n * 2 * h * w];
        {
            let data = self.value(grid).data();
            for s in 0..n {
                dvf_kernel_fwd(
                    &data[s * 2 * gh * gw..(s + 1) * 2 * gh * gw],
                    gh,
                    gw,
                    spacing_y,
                    spacing_x,
                    h,
                    w,
                    order,
                    &mut out[s * 2 * h * w..(s + 1) * 2 * h * w],
                );
            }
        }
        let rg = self.req(grid);
        Ok(self.push(
            Tensor::new(vec![n, 2, h, w], out)?,
            rg,
            Op::GridToDvf { grid, h, w, spacing_y, spacing_x, order },
        ))
    }

    /// Backward-warp a [n, 1, h, w] moving batch by a [n, 2, h, w]
    /// displacement batch.
    pub fn warp(&mut self, moving: ValueId, dvf: ValueId) -> Result<ValueId> {
        self.check_id(moving, "moving")?;
        self.check_id(dvf, "dvf")?;
        let (n, c, h, w) = dims4(self.value(moving).shape())?;
        if c != 1 {
            return Err(Error::Shape(format!("moving batch must be single-channel, got {c}")));
        }
        if self.value(dvf).shape() != [n, 2, h, w] {
            return Err(Error::Shape(format!(
                "displacement batch must be [{n}, 2, {h}, {w}], got {:?}",
                self.value(dvf).shape()
            )));
        }
        let mut out = vec![0.0; n * h * w];
        {
            let mdata = self.value(moving).data();
            let ddata = self.value(dvf).data();
            for s in 0..n {
                let plane = &mdata[s * h * w..(s + 1) * h * w];
                let dy = &ddata[s * 2 * h * w..s * 2 * h * w + h * w];
                let dx = &ddata[s * 2 * h * w + h * w..(s + 1) * 2 * h * w];
                let oplane = &mut out[s * h * w..(s + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        oplane[i] = sample_info(plane, h, w, y as f64 + dy[i], x as f64 + dx[i]).value;
                    }
                }
            }
        }
        let rg = self.req(moving) || self.req(dvf);
        Ok(self.push(Tensor::new(vec![n, 1, h, w], out)?, rg, Op::Warp { moving, dvf }))
    }

    /// Mean over the batch of per-pair -ncc(fixed, warped); scalar output.
    /// Degenerate (constant-image) pairs contribute loss 0 with zero gradient.
    pub fn ncc_loss(&mut self, fixed: ValueId, warped: ValueId) -> Result<ValueId> {
        self.check_id(fixed, "fixed")?;
        self.check_id(warped, "warped")?;
        let (n, c, h, w) = dims4(self.value(fixed).shape())?;
        if c != 1 {
            return Err(Error::Shape(format!("fixed batch must be single-channel, got {c}")));
        }
        if self.value(warped).shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "warped batch must be [{n}, 1, {h}, {w}], got {:?}",
                self.value(warped).shape()
            )));
        }
        let mut pairs = Vec::with_capacity(n);
        let mut total = 0.0;
        {
            let fdata = self.value(fixed).data();
            let wdata = self.value(warped).data();
            for s in 0..n {
                let a = &fdata[s * h * w..(s + 1) * h * w];
                let b = &wdata[s * h * w..(s + 1) * h * w];
                let stats = ncc_stats(a, b);
                total += -stats.value();
                pairs.push(stats);
            }
        }
        let rg = self.req(fixed) || self.req(warped);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            rg,
            Op::NccLoss { fixed, warped, pairs },
        ))
    }

    /// Number of degenerate (constant-image) pairs recorded by an `ncc_loss`
    /// node; None if the id is not an ncc loss.
    pub fn ncc_degenerate_count(&self, id: ValueId) -> Option<usize> {
        match &self.nodes.get(id.0)?.op {
            Op::NccLoss { pairs, .. } => Some(pairs.iter().filter(|p| p.degenerate).count()),
            _ => None,
        }
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_id(input, "input")?;
        let total: f64 = self.value(input).iter().sum();
        let rg = self.req(input);
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum { input }))
    }

    /// Dot product with a fixed (non-differentiated) weight vector; scalar
    /// output. Used to scalarize op outputs in gradient checks.
    pub fn dot_const(&mut self, input: ValueId, weights: Vec<f64>) -> Result<ValueId> {
        self.check_id(input, "input")?;
        if weights.len() != self.value(input).numel() {
            return Err(Error::Shape(format!(
                "weight vector has {} entries, value has {}",
                weights.len(),
                self.value(input).numel()
            )));
        }
        let total: f64 = self.value(input).iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let rg = self.req(input);
        Ok(self.push(Tensor::scalar(total), rg, Op::DotConst { input, weights }))
    }

    /// Reverse sweep from a scalar loss. Gradients land on every node with
    /// `requires_grad` reachable from the loss and are read via `grad`.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward computation".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward target {} does not exist on this tape",
                loss.0
            )));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.apply_adjoint(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn apply_adjoint(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], id: ValueId, len: usize, add: impl FnOnce(&mut [f64])) {
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            add(slot);
        }
        fn add_vec(dst: &mut [f64], src: &[f64]) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride } => {
                let (n, cin, h, w) = dims4(self.value(*input).shape()).expect("validated at forward");
                let kout = self.value(*kernel).shape()[0];
                let res = ops::conv2d_bwd(
                    g,
                    self.value(*input).data(),
                    n,
                    cin,
                    h,
                    w,
                    self.value(*kernel).data(),
                    kout,
                    *stride,
                    self.req(*input),
                    self.req(*kernel),
                    self.req(*bias),
                );
                if let Some(d) = res.d_in {
                    acc(grads, *input, d.len(), |s| add_vec(s, &d));
                }
                if let Some(d) = res.d_ker {
                    acc(grads, *kernel, d.len(), |s| add_vec(s, &d));
                }
                if let Some(d) = res.d_bias {
                    acc(grads, *bias, d.len(), |s| add_vec(s, &d));
                }
            }
            Op::Conv1x1 { input, kernel, bias } => {
                let (n, cin, h, w) = dims4(self.value(*input).shape()).expect("validated at forward");
                let kout = self.value(*kernel).shape()[0];
                let res = ops::conv1x1_bwd(
                    g,
                    self.value(*input).data(),
                    n,
                    cin,
                    h,
                    w,
                    self.value(*kernel).data(),
                    kout,
                    self.req(*input),
                    self.req(*kernel),
                    self.req(*bias),
                );
                if let Some(d) = res.d_in {
                    acc(grads, *input, d.len(), |s| add_vec(s, &d));
                }
                if let Some(d) = res.d_ker {
                    acc(grads, *kernel, d.len(), |s| add_vec(s, &d));
                }
                if let Some(d) = res.d_bias {
                    acc(grads, *bias, d.len(), |s| add_vec(s, &d));
                }
            }
            Op::AvgPool { input } => {
                if self.req(*input) {
                    let (n, c, h, w) = dims4(self.value(*input).shape()).expect("validated at forward");
                    let d = ops::avgpool_bwd(g, n, c, h, w);
                    acc(grads, *input, d.len(), |s| add_vec(s, &d));
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.req(*input) {
                    let len = self.value(*input).numel();
                    let d = ops::maxpool_bwd(g, argmax, len);
                    acc(grads, *input, d.len(), |s| add_vec(s, &d));
                }
            }
            Op::BatchNorm { input, scale, shift, train, xhat, inv_std } => {
                let (n, c, h, w) = dims4(self.value(*input).shape()).expect("validated at forward");
                let res = ops::bn_bwd(
                    g,
                    xhat,
                    inv_std,
                    self.value(*scale).data(),
                    n,
                    c,
                    h,
                    w,
                    *train,
                    self.req(*input),
                    self.req(*scale),
                    self.req(*shift),
                );
                if let Some(d) = res.d_in {
                    acc(grads, *input, d.len(), |s| add_vec(s, &d));
                }
                if let Some(d) = res.d_scale {
                    acc(grads, *scale, d.len(), |s| add_vec(s, &d));
                }
                if let Some(d) = res.d_shift {
                    acc(grads, *shift, d.len(), |s| add_vec(s, &d));
                }
            }
            Op::Elu { input } => {
                if self.req(*input) {
                    let d = ops::elu_bwd(g, self.value(*input).data(), self.nodes[i].value.data());
                    acc(grads, *input, d.len(), |s| add_vec(s, &d));
                }
            }
            Op::GridToDvf { grid, h, w, spacing_y, spacing_x, order } => {
                if self.req(*grid) {
                    let (n, _, gh, gw) = dims4(self.value(*grid).shape()).expect("validated at forward");
                    let mut d = vec![0.0; n * 2 * gh * gw];
                    for s in 0..n {
                        dvf_kernel_bwd(
                            &g[s * 2 * h * w..(s + 1) * 2 * h * w],
                            gh,
                            gw,
                            *spacing_y,
                            *spacing_x,
                            *h,
                            *w,
                            *order,
                            &mut d[s * 2 * gh * gw..(s + 1) * 2 * gh * gw],
                        );
                    }
                    acc(grads, *grid, d.len(), |s| add_vec(s, &d));
                }
            }
            Op::Warp { moving, dvf } => {
                let (n, _, h, w) = dims4(self.value(*moving).shape()).expect("validated at forward");
                let need_mov = self.req(*moving);
                let need_dvf = self.req(*dvf);
                let mdata = self.value(*moving).data();
                let ddata = self.value(*dvf).data();
                let mut d_mov = if need_mov { vec![0.0; n * h * w] } else { Vec::new() };
                let mut d_dvf = if need_dvf { vec![0.0; n * 2 * h * w] } else { Vec::new() };
                for s in 0..n {
                    let plane = &mdata[s * h * w..(s + 1) * h * w];
                    let dy = &ddata[s * 2 * h * w..s * 2 * h * w + h * w];
                    let dx = &ddata[s * 2 * h * w + h * w..(s + 1) * 2 * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let i = y * w + x;
                            let up = g[s * h * w + i];
                            if up == 0.0 {
                                continue;
                            }
                            let info = sample_info(plane, h, w, y as f64 + dy[i], x as f64 + dx[i]);
                            if need_dvf {
                                d_dvf[s * 2 * h * w + i] += up * info.d_dsy;
                                d_dvf[s * 2 * h * w + h * w + i] += up * info.d_dsx;
                            }
                            if need_mov {
                                for (idx, wt) in info.corners {
                                    d_mov[s * h * w + idx] += up * wt;
                                }
                            }
                        }
                    }
                }
                if need_mov {
                    acc(grads, *moving, d_mov.len(), |s| add_vec(s, &d_mov));
                }
                if need_dvf {
                    acc(grads, *dvf, d_dvf.len(), |s| add_vec(s, &d_dvf));
                }
            }
            Op::NccLoss { fixed, warped, pairs } => {
                let (n, _, h, w) = dims4(self.value(*fixed).shape()).expect("validated at forward");
                let up = g[0] / n as f64;
                let need_fixed = self.req(*fixed);
                let need_warped = self.req(*warped);
                let fdata = self.value(*fixed).data();
                let wdata = self.value(*warped).data();
                let mut d_fixed = if need_fixed { vec![0.0; n * h * w] } else { Vec::new() };
                let mut d_warped = if need_warped { vec![0.0; n * h * w] } else { Vec::new() };
                for (s, st) in pairs.iter().enumerate() {
                    if st.degenerate {
                        continue;
                    }
                    let denom = (st.saa * st.sbb).sqrt();
                    let a = &fdata[s * h * w..(s + 1) * h * w];
                    let b = &wdata[s * h * w..(s + 1) * h * w];
                    if need_warped {
                        let ratio = st.sab / st.sbb;
                        let dst = &mut d_warped[s * h * w..(s + 1) * h * w];
                        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                            *d += -up * ((x - st.a_mean) - ratio * (y - st.b_mean)) / denom;
                        }
                    }
                    if need_fixed {
                        let ratio = st.sab / st.saa;
                        let dst = &mut d_fixed[s * h * w..(s + 1) * h * w];
                        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                            *d += -up * ((y - st.b_mean) - ratio * (x - st.a_mean)) / denom;
                        }
                    }
                }
                if need_fixed {
                    acc(grads, *fixed, d_fixed.len(), |s| add_vec(s, &d_fixed));
                }
                if need_warped {
                    acc(grads, *warped, d_warped.len(), |s| add_vec(s, &d_warped));
                }
            }
            Op::Sum { input } => {
                if self.req(*input) {
                    let len = self.value(*input).numel();
                    acc(grads, *input, len, |s| {
                        for d in s.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
            }
            Op::DotConst { input, weights } => {
                if self.req(*input) {
                    acc(grads, *input, weights.len(), |s| {
                        for (d, &wt) in s.iter_mut().zip(weights) {
                            *d += g[0] * wt;
                        }
                    });
                }
            }
        }
    }
}
