//! Convolution and pixel-adaptive convolution kernels (forward and adjoint).
//!
//! Both operators lower to GEMM over an im2col matrix whose columns run over
//! every output pixel of every image in the batch (`N·Ho·Wo` columns). The
//! pixel-adaptive one works through bands of image rows so that its
//! per-offset buffers stay in cache.

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn cols(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx` (stride 1 fast path).
    fn valid_x(&self, kx: usize, wo: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(wo);
        (lo.min(hi), hi)
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.n * ho * wo;
    let kk = g.k * g.k;
    let mut col = vec![T::zero(); g.c * kk * cols];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[(n * ho + oy) * wo..(n * ho + oy + 1) * wo];
                        if g.stride == 1 {
                            let (lo, hi) = g.valid_x(kx, wo);
                            if lo < hi {
                                let s0 = lo + kx - g.pad;
                                dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back onto an `N×C×H×W` buffer.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.n * ho * wo;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src = &src_row[(n * ho + oy) * wo..(n * ho + oy + 1) * wo];
                        if g.stride == 1 {
                            let (lo, hi) = g.valid_x(kx, wo);
                            if lo < hi {
                                let d0 = lo + kx - g.pad;
                                for (d, &s) in
                                    dst_row[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi])
                                {
                                    *d += s;
                                }
                            }
                        } else {
                            for (ox, &s) in src.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst_row[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C][N·P]` matrix view of an NCHW tensor.
pub(crate) fn to_channel_matrix<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let [n, c, _, _] = t.shape();
    let p = t.plane();
    let mut out = vec![T::zero(); t.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &t.data()[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn from_channel_matrix<T: Real>(m: &[T], shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let p = h * w;
    let mut data = vec![T::zero(); n * c * p];
    for b in 0..n {
        for ch in 0..c {
            data[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&m[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    Tensor::from_vec(shape, data).expect("shape is consistent by construction")
}

/// Saved state of a standard convolution, enough to run the adjoint.
pub(crate) struct ConvSaved<T> {
    pub geom: ConvGeom,
    pub col: Vec<T>,
    pub cout: usize,
}

pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, ConvSaved<T>) {
    let [n, c, h, w] = x.shape();
    let geom = ConvGeom {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
    };
    let col = im2col(x.data(), &geom);
    let cols = geom.cols();
    let ckk = c * k * k;
    let mut out = vec![T::zero(); cout * cols];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(cols).enumerate() {
            row.fill(b[o]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        cout,
        ckk,
        cols,
        T::one(),
        weight,
        ckk,
        1,
        &col,
        cols,
        1,
        beta,
        &mut out,
        cols,
        1,
    );
    let shape = [n, cout, geom.out_h(), geom.out_w()];
    (
        from_channel_matrix(&out, shape),
        ConvSaved { geom, col, cout },
    )
}

/// Returns `(d_input, d_weight, d_bias)`; the first two only when requested.
pub(crate) fn conv_backward<T: Real>(
    saved: &ConvSaved<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let g = &saved.geom;
    let cols = g.cols();
    let ckk = g.c * g.k * g.k;
    let gm = to_channel_matrix(grad_out);
    let db: Vec<T> = gm.chunks(cols).map(|r| r.iter().copied().sum()).collect();
    let dw = need_weight.then(|| {
        let mut dw = vec![T::zero(); saved.cout * ckk];
        T::gemm(
            saved.cout,
            cols,
            ckk,
            T::one(),
            &gm,
            cols,
            1,
            &saved.col,
            1,
            cols,
            T::zero(),
            &mut dw,
            ckk,
            1,
        );
        dw
    });
    let dx = need_input.then(|| {
        let mut dcol = vec![T::zero(); ckk * cols];
        T::gemm(
            ckk,
            saved.cout,
            cols,
            T::one(),
            weight,
            1,
            ckk,
            &gm,
            cols,
            1,
            T::zero(),
            &mut dcol,
            cols,
            1,
        );
        col2im(&dcol, g)
    });
    (dx, dw, db)
}

/// How neighbouring pixels are weighted inside a PAC window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityMode {
    /// `K(f_i, f_j) = exp(-‖f_i - f_j‖² / 2σ²)`.
    Gaussian,
    /// `K ≡ 1`, i.e. a standard convolution.
    ConstantOne,
}

/// Squared guidance distances `‖f_i − f_{i+offset}‖²`, laid out `[offset][N·P]`.
///
/// Guidance outside the image reads as zero.
pub(crate) fn guidance_distances<T: Real>(guide: &Tensor<T>, k: usize) -> Vec<T> {
    let [n, d, h, w] = guide.shape();
    let p = h * w;
    let pad = (k - 1) / 2;
    let cols = n * p;
    let mut dist = vec![T::zero(); k * k * cols];
    for ky in 0..k {
        for kx in 0..k {
            let off = ky * k + kx;
            let row = &mut dist[off * cols..(off + 1) * cols];
            for b in 0..n {
                for ch in 0..d {
                    let plane = &guide.data()[(b * d + ch) * p..(b * d + ch + 1) * p];
                    for y in 0..h {
                        let ny = y as isize + ky as isize - pad as isize;
                        for x in 0..w {
                            let nx = x as isize + kx as isize - pad as isize;
                            let fj = if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                                plane[ny as usize * w + nx as usize]
                            } else {
                                T::zero()
                            };
                            let diff = plane[y * w + x] - fj;
                            row[b * p + y * w + x] += diff * diff;
                        }
                    }
                }
            }
        }
    }
    dist
}

/// Saved state of a pixel-adaptive convolution.
///
/// Partial products and affinities are recomputed tile by tile in the adjoint
/// rather than stored; only the guidance distances are kept.
pub(crate) struct PacSaved<T> {
    pub geom: ConvGeom,
    pub cout: usize,
    pub mode: AffinityMode,
    /// `[offset][N·P]`, empty for `ConstantOne`.
    pub dist: Vec<T>,
}

/// Columns per tile; whole image rows are grouped up to about this many.
const TILE_COLS: usize = 256;

/// A band of complete rows `y0..y0+rows` of image `n`.
#[derive(Clone, Copy)]
struct Tile {
    n: usize,
    y0: usize,
    rows: usize,
}

fn tiles(g: &ConvGeom) -> impl Iterator<Item = Tile> + '_ {
    let step = (TILE_COLS / g.w).clamp(1, g.h);
    (0..g.n).flat_map(move |n| {
        (0..g.h).step_by(step).map(move |y0| Tile {
            n,
            y0,
            rows: step.min(g.h - y0),
        })
    })
}

impl Tile {
    fn cols(&self, g: &ConvGeom) -> usize {
        self.rows * g.w
    }

    /// First column of the tile in `[N·P]` order.
    fn start(&self, g: &ConvGeom) -> usize {
        (self.n * g.h + self.y0) * g.w
    }

    /// Offset-major im2col of the tile into `buf` (`[offset][C][cols]`).
    fn im2col<T: Real>(&self, x: &[T], g: &ConvGeom, buf: &mut [T]) {
        let t = self.cols(g);
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_x(kx, g.w);
                for c in 0..g.c {
                    let row = &mut buf[((ky * g.k + kx) * g.c + c) * t..][..t];
                    let src = &x[(self.n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for r in 0..self.rows {
                        let dst = &mut row[r * g.w..(r + 1) * g.w];
                        let iy = (self.y0 + r + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo >= hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let s0 = iy as usize * g.w + lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Tile::im2col`], accumulated into `dx`.
    fn col2im<T: Real>(&self, buf: &[T], g: &ConvGeom, dx: &mut [T]) {
        let t = self.cols(g);
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_x(kx, g.w);
                if lo >= hi {
                    continue;
                }
                for c in 0..g.c {
                    let row = &buf[((ky * g.k + kx) * g.c + c) * t..][..t];
                    let dst = &mut dx[(self.n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for r in 0..self.rows {
                        let iy = (self.y0 + r + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let d0 = iy as usize * g.w + lo + kx - g.pad;
                        for (d, &s) in dst[d0..d0 + (hi - lo)]
                            .iter_mut()
                            .zip(&row[r * g.w + lo..r * g.w + hi])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    /// Channel rows `[C][cols]` of an NCHW tensor restricted to the tile.
    fn rows_of<'a, T: Real>(&self, t: &'a [T], g: &ConvGeom, channels: usize, c: usize) -> &'a [T] {
        let p = g.h * g.w;
        &t[(self.n * channels + c) * p + self.y0 * g.w..][..self.cols(g)]
    }
}

/// Per-offset partial convolutions of one tile: `[offset][Cout][cols]`.
fn tile_partials<T: Real>(
    col: &[T],
    weight: &[T],
    g: &ConvGeom,
    cout: usize,
    t: usize,
    out: &mut [T],
) {
    let kk = g.k * g.k;
    for off in 0..kk {
        T::gemm(
            cout,
            g.c,
            t,
            T::one(),
            &weight[off..],
            g.c * kk,
            kk,
            &col[off * g.c * t..],
            t,
            1,
            T::zero(),
            &mut out[off * cout * t..(off + 1) * cout * t],
            t,
            1,
        );
    }
}

/// Affinities of one tile, `[offset][Cout][cols]`.
fn tile_affinity<T: Real>(
    dist: &[T],
    coef: &[T],
    start: usize,
    cols: usize,
    t: usize,
    out: &mut [T],
) {
    let cout = coef.len();
    for off in 0..dist.len() / cols {
        let drow = &dist[off * cols + start..][..t];
        for (o, &c) in coef.iter().enumerate() {
            T::exp_scaled_nonpositive(c, drow, &mut out[(off * cout + o) * t..][..t]);
        }
    }
}

fn affinity_coef<T: Real>(log_sigma: &[T]) -> Vec<T> {
    log_sigma
        .iter()
        .map(|&ls| T::lit(-0.5) * (T::lit(-2.0) * ls).exp())
        .collect()
}

/// Pixel-adaptive convolution, stride 1 with zero padding `(k−1)/2`.
///
/// `weight` is `[Cout][Cin][k][k]`; `log_sigma` holds one value per output filter.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pac_forward<T: Real>(
    x: &Tensor<T>,
    guide: Option<&Tensor<T>>,
    weight: &[T],
    bias: Option<&[T]>,
    log_sigma: &[T],
    cout: usize,
    k: usize,
    mode: AffinityMode,
) -> (Tensor<T>, PacSaved<T>) {
    let [n, c, h, w] = x.shape();
    let geom = ConvGeom {
        n,
        c,
        h,
        w,
        k,
        stride: 1,
        pad: (k - 1) / 2,
    };
    let kk = k * k;
    let cols = geom.cols();
    let gaussian = mode == AffinityMode::Gaussian;
    let dist = if gaussian {
        guidance_distances(guide.expect("gaussian affinity needs guidance"), k)
    } else {
        Vec::new()
    };
    let coef = affinity_coef(log_sigma);

    let tmax = TILE_COLS.max(w).min(cols);
    let mut col = vec![T::zero(); kk * c * tmax];
    let mut partial = vec![T::zero(); kk * cout * tmax];
    let mut affinity = if gaussian {
        vec![T::zero(); partial.len()]
    } else {
        Vec::new()
    };
    let mut acc = vec![T::zero(); cout * tmax];
    let mut out = vec![T::zero(); n * cout * h * w];
    for tile in tiles(&geom) {
        let t = tile.cols(&geom);
        tile.im2col(x.data(), &geom, &mut col);
        let acc = &mut acc[..cout * t];
        for (o, row) in acc.chunks_mut(t).enumerate() {
            row.fill(bias.map_or(T::zero(), |b| b[o]));
        }
        if gaussian {
            tile_partials(&col, weight, &geom, cout, t, &mut partial);
            tile_affinity(&dist, &coef, tile.start(&geom), cols, t, &mut affinity);
            for off in 0..kk {
                let block = off * cout * t..(off + 1) * cout * t;
                for ((a, &p), &kv) in acc
                    .iter_mut()
                    .zip(&partial[block.clone()])
                    .zip(&affinity[block])
                {
                    *a += kv * p;
                }
            }
        } else {
            for off in 0..kk {
                T::gemm(
                    cout,
                    c,
                    t,
                    T::one(),
                    &weight[off..],
                    c * kk,
                    kk,
                    &col[off * c * t..],
                    t,
                    1,
                    T::one(),
                    acc,
                    t,
                    1,
                );
            }
        }
        for o in 0..cout {
            let dst = (tile.n * cout + o) * h * w + tile.y0 * w;
            out[dst..dst + t].copy_from_slice(&acc[o * t..(o + 1) * t]);
        }
    }
    let out = Tensor::from_vec([n, cout, h, w], out).expect("shape is consistent by construction");
    (
        out,
        PacSaved {
            geom,
            cout,
            mode,
            dist,
        },
    )
}

pub(crate) struct PacGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Vec<T>>,
    pub guide: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub log_sigma: Vec<T>,
}

/// Which optional adjoints [`pac_backward`] should produce.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PacNeeds {
    pub input: bool,
    pub guide: bool,
}

pub(crate) fn pac_backward<T: Real>(
    saved: &PacSaved<T>,
    x: &Tensor<T>,
    guide: Option<&Tensor<T>>,
    weight: &[T],
    log_sigma: &[T],
    grad_out: &Tensor<T>,
    needs: PacNeeds,
) -> PacGrads<T> {
    let g = &saved.geom;
    let (c, cout, k) = (g.c, saved.cout, g.k);
    let kk = k * k;
    let cols = g.cols();
    let gaussian = saved.mode == AffinityMode::Gaussian;
    let coef = affinity_coef(log_sigma);
    let inv_var: Vec<T> = coef.iter().map(|&v| T::lit(-2.0) * v).collect();

    let tmax = TILE_COLS.max(g.w).min(cols);
    let mut col = vec![T::zero(); kk * c * tmax];
    let mut dcol = if needs.input {
        vec![T::zero(); kk * c * tmax]
    } else {
        Vec::new()
    };
    let mut partial = if gaussian {
        vec![T::zero(); kk * cout * tmax]
    } else {
        Vec::new()
    };
    let mut affinity = if gaussian {
        vec![T::zero(); kk * cout * tmax]
    } else {
        Vec::new()
    };
    let mut dpartial = vec![T::zero(); kk * cout * tmax];
    let mut gt = vec![T::zero(); cout * tmax];
    let mut ddist = if gaussian && needs.guide {
        vec![T::zero(); kk * cols]
    } else {
        Vec::new()
    };
    let mut dinput = if needs.input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dweight = vec![T::zero(); cout * c * kk];
    let mut dbias = vec![T::zero(); cout];
    let mut dlog_sigma = vec![T::zero(); cout];

    for tile in tiles(g) {
        let t = tile.cols(g);
        let start = tile.start(g);
        tile.im2col(x.data(), g, &mut col);
        let gt = &mut gt[..cout * t];
        for o in 0..cout {
            let src = tile.rows_of(grad_out.data(), g, cout, o);
            gt[o * t..(o + 1) * t].copy_from_slice(src);
            dbias[o] += src.iter().copied().sum();
        }

        // d(partial) = g·K; for ConstantOne this is g itself for every offset.
        if gaussian {
            tile_partials(&col, weight, g, cout, t, &mut partial);
            tile_affinity(&saved.dist, &coef, start, cols, t, &mut affinity);
        }
        for off in 0..kk {
            for o in 0..cout {
                let base = (off * cout + o) * t;
                let grow = &gt[o * t..(o + 1) * t];
                let dprow = &mut dpartial[base..base + t];
                if !gaussian {
                    dprow.copy_from_slice(grow);
                    continue;
                }
                let arow = &affinity[base..base + t];
                let prow = &partial[base..base + t];
                let drow = &saved.dist[off * cols + start..][..t];
                let mut acc = T::zero();
                for i in 0..t {
                    dprow[i] = grow[i] * arow[i];
                    // dK/dlogσ = K·d²·σ⁻²,  dK/d(d²) = −K·σ⁻²/2
                    acc += dprow[i] * prow[i] * drow[i];
                }
                dlog_sigma[o] += acc * inv_var[o];
                if needs.guide {
                    let half = coef[o];
                    let dd = &mut ddist[off * cols + start..][..t];
                    for i in 0..t {
                        dd[i] += dprow[i] * prow[i] * half;
                    }
                }
            }
        }

        for off in 0..kk {
            let dp = &dpartial[off * cout * t..(off + 1) * cout * t];
            let colb = &col[off * c * t..(off + 1) * c * t];
            T::gemm(
                cout,
                t,
                c,
                T::one(),
                dp,
                t,
                1,
                colb,
                1,
                t,
                T::one(),
                &mut dweight[off..],
                c * kk,
                kk,
            );
            if needs.input {
                T::gemm(
                    c,
                    cout,
                    t,
                    T::one(),
                    &weight[off..],
                    kk,
                    c * kk,
                    dp,
                    t,
                    1,
                    T::zero(),
                    &mut dcol[off * c * t..(off + 1) * c * t],
                    t,
                    1,
                );
            }
        }
        if needs.input {
            tile.col2im(&dcol, g, &mut dinput);
        }
    }

    let guide_grad = if gaussian && needs.guide {
        let guide = guide.expect("gaussian affinity needs guidance");
        Some(distance_backward(guide, k, &ddist))
    } else {
        None
    };

    PacGrads {
        input: needs.input.then_some(dinput),
        guide: guide_grad,
        weight: dweight,
        bias: dbias,
        log_sigma: dlog_sigma,
    }
}

/// Adjoint of [`guidance_distances`].
fn distance_backward<T: Real>(guide: &Tensor<T>, k: usize, ddist: &[T]) -> Vec<T> {
    let [n, d, h, w] = guide.shape();
    let p = h * w;
    let pad = (k - 1) / 2;
    let cols = n * p;
    let mut df = vec![T::zero(); guide.len()];
    let two = T::lit(2.0);
    for ky in 0..k {
        for kx in 0..k {
            let off = ky * k + kx;
            let row = &ddist[off * cols..(off + 1) * cols];
            for b in 0..n {
                for ch in 0..d {
                    let base = (b * d + ch) * p;
                    for y in 0..h {
                        let ny = y as isize + ky as isize - pad as isize;
                        for x in 0..w {
                            let nx = x as isize + kx as isize - pad as isize;
                            let i = base + y * w + x;
                            let gval = row[b * p + y * w + x];
                            let inside = ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize;
                            let j = base + (ny.max(0) as usize) * w + nx.max(0) as usize;
                            let fj = if inside { guide.data()[j] } else { T::zero() };
                            let t = two * (guide.data()[i] - fj) * gval;
                            df[i] += t;
                            if inside {
                                df[j] -= t;
                            }
                        }
                    }
                }
            }
        }
    }
    df
}
