use rand::Rng;

use super::direct;
use super::{check_grad_shape, he_normal, missing_forward, prefixed, Layer, LayerMode, Named, Param};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, map_tiles, split_channels, ConvGeometry, MatView, Scalar, Shape4, Tensor};
use crate::tensor::gemm_into;

/// Tiles processed together in backward; bounds the live im2col buffers.
const BACKWARD_TILE_GROUP: usize = 8;

/// Same-padded convolutions with at most this many output channels use the
/// direct kernels; wider ones go through im2col + GEMM.
const DIRECT_MAX_COUT: usize = 8;

/// 2-D convolution as im2col + GEMM. Weights are `[kh, kw, Cin, Cout]`.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar = f32> {
    weight: Param<F>,
    bias: Param<F>,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Tensor<F>, ConvGeometry)>,
}

impl<F: Scalar> Conv2d<F> {
    /// Square kernel with zero "same" padding (`pad = (k - 1) / 2`, stride 1), He-initialised.
    pub fn same<R: Rng>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::config(format!(
                "same padding needs an odd kernel size, got {k}"
            )));
        }
        Self::new(k, k, cin, cout, 1, (k - 1) / 2, rng)
    }

    pub fn new<R: Rng>(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = he_normal(rng, &[kh, kw, cin, cout], kh * kw * cin)?;
        let bias = Tensor::zeros(&[cout])?;
        Self::from_tensors(weight, bias, stride, pad)
    }

    pub fn from_tensors(weight: Tensor<F>, bias: Tensor<F>, stride: usize, pad: usize) -> Result<Self> {
        let [kh, kw, cin, cout] = match *weight.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::size("conv weight must be [kh, kw, Cin, Cout]")),
        };
        if bias.shape() != [cout] {
            return Err(Error::size(format!(
                "conv bias {:?} does not match {cout} output channels",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be positive"));
        }
        Ok(Conv2d {
            weight: Param::new(weight),
            bias: Param::new(bias),
            kh,
            kw,
            cin,
            cout,
            stride,
            pad,
            cache: None,
        })
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn padding(&self) -> usize {
        self.pad
    }

    pub fn weight(&self) -> &Param<F> {
        &self.weight
    }

    pub fn bias(&self) -> &Param<F> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Param<F> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Param<F> {
        &mut self.bias
    }

    fn direct(&self) -> bool {
        self.kh == self.kw && self.stride == 1 && 2 * self.pad + 1 == self.kh && self.cout <= DIRECT_MAX_COUT
    }

    fn geometry(&self, x: &Tensor<F>) -> Result<ConvGeometry> {
        let s = x.shape4()?;
        if s.c != self.cin {
            return Err(Error::size(format!(
                "conv expects {} input channels, got {}",
                self.cin, s.c
            )));
        }
        ConvGeometry::new(s, self.kh, self.kw, self.stride, self.pad)
    }
}

impl<F: Scalar> Layer<F> for Conv2d<F> {
    fn forward(&mut self, x: &Tensor<F>, _mode: LayerMode) -> Result<Tensor<F>> {
        let geom = self.geometry(x)?;
        if self.direct() {
            let out = direct::forward(x.data(), geom.input, self.weight.value.data(), self.kh, self.cout, self.bias.value.data());
            let out = Tensor::from_vec(&[geom.input.n, geom.out_h, geom.out_w, self.cout], out)?;
            self.cache = Some((x.clone(), geom));
            return Ok(out);
        }
        let k = geom.cols();
        let cout = self.cout;
        let w = MatView::row_major(self.weight.value.data(), k, cout);
        let bias = self.bias.value.data();
        let input = x.data();
        let tiles = map_tiles(geom.rows(), |rows| {
            let mut cols = vec![F::zero(); rows.len() * k];
            geom.im2col_rows(input, rows.clone(), &mut cols);
            let mut out: Vec<F> = bias.iter().copied().cycle().take(rows.len() * cout).collect();
            gemm_into(MatView::row_major(&cols, rows.len(), k), w, F::one(), &mut out);
            out
        });
        let out = Tensor::from_vec(
            &[geom.input.n, geom.out_h, geom.out_w, cout],
            tiles.concat(),
        )?;
        self.cache = Some((x.clone(), geom));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let (x, geom) = self.cache.as_ref().ok_or_else(|| missing_forward("conv2d"))?;
        let cout = self.cout;
        check_grad_shape(
            "conv2d",
            &[geom.input.n, geom.out_h, geom.out_w, cout],
            grad,
        )?;
        let dy = grad.data();
        let input = x.data();
        let mut db = vec![F::zero(); cout];
        for row in dy.chunks_exact(cout) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
        }
        self.bias.grad = Tensor::from_vec(&[cout], db)?;
        if self.direct() {
            let gs = Shape4 { c: cout, ..geom.input };
            let w = self.weight.value.data();
            let dx = direct::input_grad(dy, gs, w, self.kh, self.cin);
            let dw = direct::weight_grad(input, geom.input, dy, self.kh, cout);
            self.weight.grad = Tensor::from_vec(self.weight.value.shape(), dw)?;
            return Tensor::from_vec(x.shape(), dx);
        }
        let k = geom.cols();
        let w = MatView::row_major(self.weight.value.data(), k, cout);

        let mut dw = vec![F::zero(); k * cout];
        let mut dx = vec![F::zero(); input.len()];
        let tiles = crate::tensor::row_tiles(geom.rows());
        for group in tiles.chunks(BACKWARD_TILE_GROUP) {
            let parts = crate::parallel::map(group.to_vec(), |rows| {
                let mut cols = vec![F::zero(); rows.len() * k];
                geom.im2col_rows(input, rows.clone(), &mut cols);
                let dy_tile = MatView::row_major(&dy[rows.start * cout..rows.end * cout], rows.len(), cout);
                let mut dw_part = vec![F::zero(); k * cout];
                gemm_into(MatView::row_major(&cols, rows.len(), k).t(), dy_tile, F::zero(), &mut dw_part);
                // cols buffer is reused for d(cols) = dy * W^T
                gemm_into(dy_tile, w.t(), F::zero(), &mut cols);
                (rows, dw_part, cols)
            });
            for (rows, dw_part, dcols) in parts {
                dw.iter_mut().zip(&dw_part).for_each(|(a, &b)| *a = *a + b);
                geom.col2im_rows_add(&dcols, rows, &mut dx);
            }
        }

        self.weight.grad = Tensor::from_vec(self.weight.value.shape(), dw)?;
        Tensor::from_vec(x.shape(), dx)
    }

    fn params(&self) -> Vec<Named<&Param<F>>> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Same-padded convolutions with different kernel sizes applied to one input,
/// outputs concatenated along channels in kernel order.
#[derive(Debug, Clone)]
pub struct ParallelConv<F: Scalar = f32> {
    branches: Vec<Conv2d<F>>,
    kernels: Vec<usize>,
}

impl<F: Scalar> ParallelConv<F> {
    pub fn new<R: Rng>(kernels: &[usize], cin: usize, cout_each: usize, rng: &mut R) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::config("parallel convolution needs at least one kernel size"));
        }
        let branches = kernels
            .iter()
            .map(|&k| Conv2d::same(k, cin, cout_each, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParallelConv {
            branches,
            kernels: kernels.to_vec(),
        })
    }

    pub fn branches(&self) -> &[Conv2d<F>] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [Conv2d<F>] {
        &mut self.branches
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(Conv2d::out_channels).sum()
    }

    fn branch_name(&self, i: usize) -> String {
        format!("k{}", self.kernels[i])
    }
}

impl<F: Scalar> Layer<F> for ParallelConv<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        let parts = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, mode))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&parts)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let widths: Vec<usize> = self.branches.iter().map(Conv2d::out_channels).collect();
        let parts = split_channels(grad, &widths)?;
        let mut dx: Option<Tensor<F>> = None;
        for (branch, g) in self.branches.iter_mut().zip(&parts) {
            let d = branch.backward(g)?;
            dx = Some(match dx {
                None => d,
                Some(acc) => acc.zip_map(&d, |a, b| a + b)?,
            });
        }
        dx.ok_or_else(|| missing_forward("parallel conv"))
    }

    fn params(&self) -> Vec<Named<&Param<F>>> {
        self.branches
            .iter()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&self.branch_name(i), b.params()).collect::<Vec<_>>())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        let names: Vec<String> = (0..self.branches.len()).map(|i| self.branch_name(i)).collect();
        self.branches
            .iter_mut()
            .zip(&names)
            .flat_map(|(b, name)| prefixed(name, b.params_mut()).collect::<Vec<_>>())
            .collect()
    }
}
