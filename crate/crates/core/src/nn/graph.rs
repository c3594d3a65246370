use std::rc::Rc;

use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Given the output gradient and a per-parent "wants gradient" mask,
/// produce gradients for each parent (`None` where masked off).
type BackwardFn = Box<dyn Fn(&Arr, &[bool]) -> Vec<Option<Arr>>>;

struct Node {
    data: Rc<Arr>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients for one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a node that gradients flow *into* (a parameter or an input
    /// under test).
    pub fn leaf(&mut self, data: Arr) -> Var {
        self.push(data, vec![], None, true)
    }

    /// Inserts a node that never receives gradients.
    pub fn constant(&mut self, data: Arr) -> Var {
        self.push(data, vec![], None, false)
    }

    pub fn data(&self, v: Var) -> &Arr {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let d = self.data(v);
        debug_assert_eq!(d.len(), 1, "scalar() on non-scalar node");
        *d.iter().next().expect("scalar node is non-empty")
    }

    fn rc(&self, v: Var) -> Rc<Arr> {
        Rc::clone(&self.nodes[v.0].data)
    }

    fn push(
        &mut self,
        data: Arr,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        force_grad: bool,
    ) -> Var {
        let needs_grad = force_grad || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward = if needs_grad { backward } else { None };
        self.nodes.push(Node {
            data: Rc::new(data),
            parents,
            backward,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(
        &mut self,
        parent: Var,
        data: Arr,
        back: impl Fn(&Arr) -> Arr + 'static,
    ) -> Var {
        self.push(
            data,
            vec![parent],
            Some(Box::new(move |g, wants| {
                vec![wants[0].then(|| back(g))]
            })),
            false,
        )
    }

    /// Reverse pass from `root` (any shape; seeded with ones). Returns the
    /// accumulated gradient per node; only nodes flagged `needs_grad`
    /// receive one.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(self.data(root).raw_dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let (Some(bw), Some(g)) = (&node.backward, &grads[idx]) else {
                continue;
            };
            let wants: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let parent_grads = bw(g, &wants);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[parent.0].data.shape(),
                    "gradient shape mismatch for parent {}",
                    parent.0
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise binary ops with numpy-style broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.rc(a), self.rc(b));
        let out = broadcast_zip(&da, &db, |x, y| x + y);
        let (sa, sb) = (da.shape().to_vec(), db.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, wants| {
                vec![
                    wants[0].then(|| unbroadcast(g, &sa)),
                    wants[1].then(|| unbroadcast(g, &sb)),
                ]
            })),
            false,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.rc(a), self.rc(b));
        let out = broadcast_zip(&da, &db, |x, y| x - y);
        let (sa, sb) = (da.shape().to_vec(), db.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, wants| {
                vec![
                    wants[0].then(|| unbroadcast(g, &sa)),
                    wants[1].then(|| unbroadcast(&g.mapv(|v| -v), &sb)),
                ]
            })),
            false,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.rc(a), self.rc(b));
        let out = broadcast_zip(&da, &db, |x, y| x * y);
        let (ca, cb) = (Rc::clone(&da), Rc::clone(&db));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, wants| {
                vec![
                    wants[0].then(|| unbroadcast(&broadcast_zip(g, &cb, |x, y| x * y), ca.shape())),
                    wants[1].then(|| unbroadcast(&broadcast_zip(g, &ca, |x, y| x * y), cb.shape())),
                ]
            })),
            false,
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.rc(a), self.rc(b));
        let out = broadcast_zip(&da, &db, |x, y| x / y);
        let (ca, cb) = (Rc::clone(&da), Rc::clone(&db));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, wants| {
                let ga = wants[0].then(|| unbroadcast(&broadcast_zip(g, &cb, |x, y| x / y), ca.shape()));
                let gb = wants[1].then(|| {
                    let num = broadcast_zip(&broadcast_zip(g, &ca, |x, y| x * y), &cb, |x, y| {
                        -x / (y * y)
                    });
                    unbroadcast(&num, cb.shape())
                });
                vec![ga, gb]
            })),
            false,
        )
    }

    // ---- scalar / unary ----

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.data(a).mapv(|v| v * k);
        self.unary(a, out, move |g| g.mapv(|v| v * k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.data(a).mapv(|v| v + k);
        self.unary(a, out, |g| g.clone())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.rc(a);
        let out = x.mapv(|v| v.max(0.0));
        self.unary(a, out, move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&x, |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            dx
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.data(a).mapv(sigmoid_scalar);
        let saved = out.clone();
        self.unary(a, out, move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&saved, |gv, &s| *gv *= s * (1.0 - s));
            dx
        })
    }

    /// `x * sigmoid(x)`; smooth everywhere, which keeps central-difference
    /// gradient checks tight.
    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.rc(a);
        let out = x.mapv(|v| v * sigmoid_scalar(v));
        self.unary(a, out, move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&x, |gv, &xv| {
                let s = sigmoid_scalar(xv);
                *gv *= s * (1.0 + xv * (1.0 - s));
            });
            dx
        })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let x = self.rc(a);
        let out = x.mapv(f64::ln);
        self.unary(a, out, move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&x, |gv, &xv| *gv /= xv);
            dx
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.data(a).mapv(f64::sqrt);
        let saved = out.clone();
        self.unary(a, out, move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&saved, |gv, &s| *gv *= 0.5 / s);
            dx
        })
    }

    /// Clamp with straight-through-then-zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.rc(a);
        let out = x.mapv(|v| v.clamp(lo, hi));
        self.unary(a, out, move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&x, |gv, &xv| {
                if xv < lo || xv > hi {
                    *gv = 0.0;
                }
            });
            dx
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.data(a).raw_dim();
        let out = ndarray::arr0(self.data(a).sum()).into_dyn();
        self.unary(a, out, move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            Arr::from_elem(shape.clone(), gv)
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keep: bool) -> Var {
        let src = self.rc(a);
        let mut out = src.sum_axis(Axis(axis)).into_dyn();
        if keep {
            out = out.insert_axis(Axis(axis));
        }
        let in_shape = src.shape().to_vec();
        self.unary(a, out, move |g| {
            let gk = if keep {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(axis))
            };
            gk.broadcast(IxDyn(&in_shape))
                .expect("sum_axis grad broadcast")
                .to_owned()
        })
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keep: bool) -> Var {
        let n = self.data(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis, keep);
        self.scale(s, 1.0 / n)
    }

    /// Global average pool `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let src = self.rc(a);
        let shape = src.shape().to_vec();
        debug_assert_eq!(shape.len(), 4, "global_avg_pool expects NCHW");
        let (h, w) = (shape[2], shape[3]);
        let x4 = src.view().into_dimensionality::<Ix4>().expect("NCHW");
        let out = x4
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|v| v / (h * w) as f64)
            .into_dyn();
        self.unary(a, out, move |g| {
            let scale = 1.0 / (h * w) as f64;
            let g2 = g.view().into_dimensionality::<Ix2>().expect("NC grad");
            let mut dx = Array4::zeros((shape[0], shape[1], h, w));
            for n in 0..shape[0] {
                for c in 0..shape[1] {
                    let v = g2[[n, c]] * scale;
                    dx.slice_mut(ndarray::s![n, c, .., ..]).fill(v);
                }
            }
            dx.into_dyn()
        })
    }

    // ---- softmax family ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let out = softmax_data(self.data(a), axis);
        let saved = out.clone();
        self.unary(a, out, move |g| {
            // ds = s * (g - sum(g * s, axis, keep))
            let gs = broadcast_zip(g, &saved, |x, y| x * y);
            let sum = gs.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let mut dx = g.clone();
            dx.zip_mut_with(
                &sum.broadcast(g.raw_dim()).expect("softmax grad broadcast"),
                |gv, &s| *gv -= s,
            );
            dx.zip_mut_with(&saved, |gv, &s| *gv *= s);
            dx
        })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Var {
        let x = self.data(a);
        let max = x
            .map_axis(Axis(axis), |lane| {
                lane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
            .insert_axis(Axis(axis));
        let shifted = broadcast_zip(x, &max, |v, m| v - m);
        let logsum = shifted
            .mapv(f64::exp)
            .sum_axis(Axis(axis))
            .mapv(f64::ln)
            .insert_axis(Axis(axis));
        let out = broadcast_zip(&shifted, &logsum, |v, l| v - l);
        let saved = out.clone();
        self.unary(a, out, move |g| {
            // dx = g - softmax * sum(g, axis, keep)
            let gsum = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let sm = saved.mapv(f64::exp);
            let spread = broadcast_zip(&sm, &gsum, |s, t| s * t);
            let mut dx = g.clone();
            dx.zip_mut_with(&spread, |gv, &s| *gv -= s);
            dx
        })
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.rc(a);
        let in_shape = src.shape().to_vec();
        let out = src
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        self.unary(a, out, move |g| {
            g.to_shape(IxDyn(&in_shape))
                .expect("reshape grad")
                .to_owned()
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|v| self.data(*v).view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = parts
            .iter()
            .map(|v| self.data(*v).shape()[axis])
            .collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, wants| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(wants)
                    .map(|(&len, &want)| {
                        let piece = want.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(offset..offset + len))
                                .to_owned()
                        });
                        offset += len;
                        piece
                    })
                    .collect()
            })),
            false,
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let src = self.rc(a);
        let out = src
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let in_shape = src.shape().to_vec();
        self.unary(a, out, move |g| {
            let mut dx = Arr::zeros(IxDyn(&in_shape));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            dx
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let da = self.rc(a);
        let db = self.rc(b);
        let a2 = da.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let b2 = db.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let out = a2.dot(&b2).into_dyn();
        let (ca, cb) = (Rc::clone(&da), Rc::clone(&db));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, wants| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul grad");
                let a2 = ca.view().into_dimensionality::<Ix2>().expect("lhs");
                let b2 = cb.view().into_dimensionality::<Ix2>().expect("rhs");
                vec![
                    wants[0].then(|| g2.dot(&b2.t()).into_dyn()),
                    wants[1].then(|| a2.t().dot(&g2).into_dyn()),
                ]
            })),
            false,
        )
    }

    /// `a . b^T` for two 2-D operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let da = self.rc(a);
        let db = self.rc(b);
        let a2 = da.view().into_dimensionality::<Ix2>().expect("matmul_nt lhs 2-D");
        let b2 = db.view().into_dimensionality::<Ix2>().expect("matmul_nt rhs 2-D");
        let out = a2.dot(&b2.t()).into_dyn();
        let (ca, cb) = (Rc::clone(&da), Rc::clone(&db));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, wants| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-D");
                let a2 = ca.view().into_dimensionality::<Ix2>().expect("lhs");
                let b2 = cb.view().into_dimensionality::<Ix2>().expect("rhs");
                vec![
                    wants[0].then(|| g2.dot(&b2).into_dyn()),
                    wants[1].then(|| g2.t().dot(&a2).into_dyn()),
                ]
            })),
            false,
        )
    }

    /// Affine map `y = x . w^T + b` with `x: (N, F)`, `w: (O, F)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let dx = self.rc(x);
        let dw = self.rc(w);
        let dbias = self.rc(b);
        let x2 = dx.view().into_dimensionality::<Ix2>().expect("linear x 2-D");
        let w2 = dw.view().into_dimensionality::<Ix2>().expect("linear w 2-D");
        let b1 = dbias.view().into_dimensionality::<Ix1>().expect("linear b 1-D");
        let mut out = x2.dot(&w2.t());
        out += &b1;
        let (cx, cw) = (Rc::clone(&dx), Rc::clone(&dw));
        self.push(
            out.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |g, wants| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("linear grad");
                let x2 = cx.view().into_dimensionality::<Ix2>().expect("x");
                let w2 = cw.view().into_dimensionality::<Ix2>().expect("w");
                vec![
                    wants[0].then(|| g2.dot(&w2).into_dyn()),
                    wants[1].then(|| g2.t().dot(&x2).into_dyn()),
                    wants[2].then(|| g2.sum_axis(Axis(0)).into_dyn()),
                ]
            })),
            false,
        )
    }

    /// 2-D convolution via im2col. `x: (N, C, H, W)`, `w: (O, C, k, k)`,
    /// `b: (O)`; zero padding `pad`, square stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let dx = self.rc(x);
        let dw = self.rc(w);
        let dbias = self.rc(b);
        let x4 = dx.view().into_dimensionality::<Ix4>().expect("conv x NCHW");
        let (n, c, h, wdt) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let wshape = dw.shape().to_vec();
        let (o, kc, k) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(kc, c, "conv2d channel mismatch");
        assert_eq!(wshape[3], k, "conv2d kernels are square");
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wdt, k, stride, pad);

        let cols = Rc::new(im2col(&x4, k, stride, pad, oh, ow)); // (N*OH*OW, C*k*k)
        let wm = dw
            .to_shape(IxDyn(&[o, c * k * k]))
            .expect("conv weight reshape")
            .to_owned()
            .into_dimensionality::<Ix2>()
            .expect("conv weight 2-D");
        let mut out_mat = cols.dot(&wm.t()); // (N*OH*OW, O)
        let b1 = dbias.view().into_dimensionality::<Ix1>().expect("conv bias");
        out_mat += &b1;
        let out = out_mat
            .into_shape_with_order((n, oh, ow, o))
            .expect("conv out reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn();

        let cols_c = Rc::clone(&cols);
        let in_shape = [n, c, h, wdt];
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g, wants| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("conv grad");
                let g_mat = g4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((n * oh * ow, o))
                    .expect("conv grad reshape");
                let dweight = wants[1].then(|| {
                    g_mat
                        .t()
                        .dot(&*cols_c)
                        .into_shape_with_order((o, c, k, k))
                        .expect("dW reshape")
                        .into_dyn()
                });
                let dbias = wants[2].then(|| g_mat.sum_axis(Axis(0)).into_dyn());
                let dinput = wants[0].then(|| {
                    let dcols = g_mat.dot(&wm);
                    col2im(&dcols, in_shape, k, stride, pad, oh, ow).into_dyn()
                });
                vec![dinput, dweight, dbias]
            })),
            false,
        )
    }

    /// Depthwise 3x3-style convolution. `x: (N, C, H, W)`, `w: (C, k, k)`,
    /// `b: (C)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let dx = self.rc(x);
        let dw = self.rc(w);
        let dbias = self.rc(b);
        let x4 = dx.view().into_dimensionality::<Ix4>().expect("dwconv x NCHW");
        let (n, c, h, wdt) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let k = dw.shape()[1];
        assert_eq!(dw.shape()[0], c, "dwconv channel mismatch");
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wdt, k, stride, pad);
        let mut out = Array4::zeros((n, c, oh, ow));
        {
            let w3 = dw.view().into_dimensionality::<ndarray::Ix3>().expect("dw w");
            let b1 = dbias.view().into_dimensionality::<Ix1>().expect("dw b");
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b1[ci];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wdt
                                    {
                                        acc += x4[[ni, ci, iy as usize, ix as usize]]
                                            * w3[[ci, ky, kx]];
                                    }
                                }
                            }
                            out[[ni, ci, oy, ox]] = acc;
                        }
                    }
                }
            }
        }
        let (cx, cw) = (Rc::clone(&dx), Rc::clone(&dw));
        self.push(
            out.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |g, wants| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("dw grad");
                let x4 = cx.view().into_dimensionality::<Ix4>().expect("dw x");
                let w3 = cw.view().into_dimensionality::<ndarray::Ix3>().expect("dw w");
                let mut dinput = wants[0].then(|| Array4::<f64>::zeros((n, c, h, wdt)));
                let mut dweight = wants[1].then(|| ndarray::Array3::<f64>::zeros((c, k, k)));
                let dbias = wants[2].then(|| {
                    let mut db = Array1::zeros(c);
                    for ci in 0..c {
                        db[ci] = g4.slice(ndarray::s![.., ci, .., ..]).sum();
                    }
                    db.into_dyn()
                });
                if dinput.is_some() || dweight.is_some() {
                    for ni in 0..n {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g4[[ni, ci, oy, ox]];
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy as usize >= h
                                                || ix as usize >= wdt
                                            {
                                                continue;
                                            }
                                            let (iy, ix) = (iy as usize, ix as usize);
                                            if let Some(di) = dinput.as_mut() {
                                                di[[ni, ci, iy, ix]] += gv * w3[[ci, ky, kx]];
                                            }
                                            if let Some(dwt) = dweight.as_mut() {
                                                dwt[[ci, ky, kx]] += gv * x4[[ni, ci, iy, ix]];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    dinput.map(|d| d.into_dyn()),
                    dweight.map(|d| d.into_dyn()),
                    dbias,
                ]
            })),
            false,
        )
    }
}

pub(crate) fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_data(x: &Arr, axis: usize) -> Arr {
    let max = x
        .map_axis(Axis(axis), |lane| {
            lane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .insert_axis(Axis(axis));
    let mut out = broadcast_zip(x, &max, |v, m| (v - m).exp());
    let sum = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    out = broadcast_zip(&out, &sum, |v, s| v / s);
    out
}

/// Numpy-style broadcast shape of two operands.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Elementwise combine with two-sided broadcasting.
pub(crate) fn broadcast_zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = av.to_owned();
    out.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
    out
}

/// Reduces a broadcast gradient back to `target` shape by summing the
/// expanded axes.
pub(crate) fn unbroadcast(grad: &Arr, target: &[usize]) -> Arr {
    if grad.shape() == target {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, (&gd, &td)) in g.shape().to_vec().iter().zip(target).enumerate() {
        if gd != td {
            debug_assert_eq!(td, 1, "unbroadcast target dim");
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn im2col(
    x: &ndarray::ArrayView4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = Array2::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            cols[[row, (ci * k + ky) * k + kx]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let [n, c, h, w] = shape;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] +=
                                dcols[[row, (ci * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_arr(rng: &mut impl Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum of build(x)) / dx over every
    /// coordinate of `x0`.
    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, x0: &Arr, tol: f64) {
        let loss_of = |x: &Arr| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let out = build(&mut g, v);
            let s = g.sum_all(out);
            g.scalar(s)
        };
        let mut g = Graph::new();
        let v = g.leaf(x0.clone());
        let out = build(&mut g, v);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        let analytic = grads.get(v).expect("leaf grad").clone();

        let h = 1e-5;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let got = analytic.as_slice().unwrap()[idx];
            let denom = numeric.abs().max(got.abs()).max(1e-8);
            assert!(
                (numeric - got).abs() / denom < tol,
                "coord {idx}: numeric {numeric} vs analytic {got}"
            );
        }
    }

    #[test]
    fn elementwise_binary_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_arr(&mut rng, &[3, 4]);
        let other = random_arr(&mut rng, &[3, 4]).mapv(|v| v + 2.5);
        for op in 0..4 {
            let o = other.clone();
            check_grad(
                move |g, v| {
                    let c = g.constant(o.clone());
                    match op {
                        0 => g.add(v, c),
                        1 => g.sub(v, c),
                        2 => g.mul(v, c),
                        _ => g.div(v, c),
                    }
                },
                &x,
                1e-6,
            );
        }
    }

    #[test]
    fn broadcast_grads_reduce_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // gradient w.r.t. the small operand must sum over the broadcast axes
        let small = random_arr(&mut rng, &[1, 4]);
        let big = random_arr(&mut rng, &[3, 4]);
        check_grad(
            move |g, v| {
                let b = g.constant(big.clone());
                g.mul(v, b)
            },
            &small,
            1e-6,
        );
        let bias = random_arr(&mut rng, &[5]);
        let big2 = random_arr(&mut rng, &[2, 3, 5]);
        check_grad(
            move |g, v| {
                let b = g.constant(big2.clone());
                g.add(b, v)
            },
            &bias,
            1e-6,
        );
    }

    #[test]
    fn activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // keep ReLU inputs away from the kink
        let x = random_arr(&mut rng, &[4, 5]).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_grad(|g, v| g.relu(v), &x, 1e-5);
        check_grad(|g, v| g.sigmoid(v), &x, 1e-6);
        check_grad(|g, v| g.silu(v), &x, 1e-6);
        let positive = x.mapv(|v| v.abs() + 0.5);
        check_grad(|g, v| g.log(v), &positive, 1e-6);
        check_grad(|g, v| g.sqrt(v), &positive, 1e-6);
    }

    #[test]
    fn reduction_and_shape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_arr(&mut rng, &[2, 3, 4]);
        check_grad(|g, v| g.mean_all(v), &x, 1e-6);
        check_grad(|g, v| g.sum_axis(v, 1, false), &x, 1e-6);
        check_grad(|g, v| g.mean_axis(v, 2, true), &x, 1e-6);
        check_grad(|g, v| g.reshape(v, &[6, 4]), &x, 1e-6);
        check_grad(|g, v| g.slice_axis(v, 2, 1, 2), &x, 1e-6);
        let nchw = random_arr(&mut rng, &[2, 3, 4, 4]);
        check_grad(|g, v| g.global_avg_pool(v), &nchw, 1e-6);
    }

    #[test]
    fn softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_arr(&mut rng, &[3, 6]);
        // weight the outputs so the (degenerate) uniform seed does not
        // cancel the softmax jacobian
        let w = random_arr(&mut rng, &[3, 6]);
        let w2 = w.clone();
        check_grad(
            move |g, v| {
                let s = g.softmax(v, 1);
                let c = g.constant(w.clone());
                g.mul(s, c)
            },
            &x,
            1e-6,
        );
        check_grad(
            move |g, v| {
                let s = g.log_softmax(v, 1);
                let c = g.constant(w2.clone());
                g.mul(s, c)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn softmax_values_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_arr(&mut rng, &[4, 7]).mapv(|v| v * 30.0); // exercise stability
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, 1);
        for row in g.data(s).view().into_dimensionality::<Ix2>().unwrap().rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let ls = g.log_softmax(v, 1);
        let sm = g.data(s).clone();
        let back = g.data(ls).mapv(f64::exp);
        assert!(sm.iter().zip(back.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn matmul_and_linear_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_arr(&mut rng, &[3, 4]);
        let w = random_arr(&mut rng, &[5, 4]);
        let b = random_arr(&mut rng, &[5]);
        let (wc, bc) = (w.clone(), b.clone());
        check_grad(
            move |g, v| {
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                g.linear(v, wv, bv)
            },
            &x,
            1e-6,
        );
        let (xc, bc2) = (x.clone(), b.clone());
        check_grad(
            move |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bc2.clone());
                g.linear(xv, v, bv)
            },
            &w,
            1e-6,
        );
        let (xc2, wc2) = (x.clone(), w.clone());
        check_grad(
            move |g, v| {
                let xv = g.constant(xc2.clone());
                let wv = g.constant(wc2.clone());
                g.linear(xv, wv, v)
            },
            &b,
            1e-6,
        );
        let m = random_arr(&mut rng, &[4, 6]);
        check_grad(
            move |g, v| {
                let mv = g.constant(m.clone());
                g.matmul(v, mv)
            },
            &x,
            1e-6,
        );
        // a . b^T, both operands
        let other = random_arr(&mut rng, &[7, 4]);
        let oc = other.clone();
        check_grad(
            move |g, v| {
                let ov = g.constant(oc.clone());
                g.matmul_nt(v, ov)
            },
            &x,
            1e-6,
        );
        let xc3 = x.clone();
        check_grad(
            move |g, v| {
                let xv = g.constant(xc3.clone());
                g.matmul_nt(xv, v)
            },
            &other,
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_direct_convolution_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_arr(&mut rng, &[2, 3, 6, 5]);
        let w = random_arr(&mut rng, &[4, 3, 3, 3]);
        let b = random_arr(&mut rng, &[4]);
        let (stride, pad) = (2usize, 1usize);

        // direct nested-loop oracle
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
        let oh = conv_out(6, 3, stride, pad);
        let ow = conv_out(5, 3, stride, pad);
        let mut expected = Array4::<f64>::zeros((2, 4, oh, ow));
        for n in 0..2 {
            for o in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[[o]];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < 6 && (ix as usize) < 5
                                    {
                                        acc += x4[[n, c, iy as usize, ix as usize]]
                                            * w4[[o, c, ky, kx]];
                                    }
                                }
                            }
                        }
                        expected[[n, o, oy, ox]] = acc;
                    }
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let out = g.conv2d(xv, wv, bv, stride, pad);
        let diff = g
            .data(out)
            .iter()
            .zip(expected.iter())
            .map(|(a, e)| (a - e).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "conv forward mismatch {diff}");

        let (wc, bc) = (w.clone(), b.clone());
        check_grad(
            move |g, v| {
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                g.conv2d(v, wv, bv, stride, pad)
            },
            &x,
            1e-5,
        );
        let (xc, bc2) = (x.clone(), b.clone());
        check_grad(
            move |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bc2.clone());
                g.conv2d(xv, v, bv, stride, pad)
            },
            &w,
            1e-5,
        );
        let (xc2, wc2) = (x.clone(), w.clone());
        check_grad(
            move |g, v| {
                let xv = g.constant(xc2.clone());
                let wv = g.constant(wc2.clone());
                g.conv2d(xv, wv, v, stride, pad)
            },
            &b,
            1e-5,
        );
    }

    #[test]
    fn depthwise_conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_arr(&mut rng, &[2, 4, 5, 5]);
        let w = random_arr(&mut rng, &[4, 3, 3]);
        let b = random_arr(&mut rng, &[4]);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let (wc, bc) = (w.clone(), b.clone());
            check_grad(
                move |g, v| {
                    let wv = g.constant(wc.clone());
                    let bv = g.constant(bc.clone());
                    g.depthwise_conv2d(v, wv, bv, stride, pad)
                },
                &x,
                1e-5,
            );
            let (xc, bc2) = (x.clone(), b.clone());
            check_grad(
                move |g, v| {
                    let xv = g.constant(xc.clone());
                    let bv = g.constant(bc2.clone());
                    g.depthwise_conv2d(xv, v, bv, stride, pad)
                },
                &w,
                1e-5,
            );
        }
    }

    #[test]
    fn concat_and_fanout_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_arr(&mut rng, &[2, 3]);
        // x used twice: gradients must accumulate
        check_grad(
            |g, v| {
                let doubled = g.concat(&[v, v], 1);
                g.mul(doubled, doubled)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn constants_do_not_get_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Arr::ones(IxDyn(&[2, 2])));
        let l = g.leaf(Arr::ones(IxDyn(&[2, 2])));
        let out = g.mul(c, l);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(l).is_some());
    }

    #[test]
    fn clamp_gradient_mask() {
        let x = ndarray::arr1(&[-2.0, 0.5, 2.0]).into_dyn();
        let mut g = Graph::new();
        let v = g.leaf(x);
        let out = g.clamp(v, 0.0, 1.0);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        let dx = grads.get(v).unwrap();
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }
}
