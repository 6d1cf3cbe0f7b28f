//! One finite-difference case per autodiff primitive, shared by the gradient
//! tests and the acceptance run.

use psgalign::autodiff::{Graph, Tensor, TensorError, Var};

use super::{grad_check, project, randn, rng, uniform};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Loss = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>>;

pub struct Case {
    pub group: &'static str,
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Loss,
}

impl Case {
    /// Relative error of reverse-mode against central differences.
    pub fn error(&self) -> f64 {
        grad_check(&self.inputs, H, |g, v| (self.f)(g, v))
    }
}

fn case<F>(group: &'static str, name: &'static str, inputs: Vec<Tensor>, f: F) -> Case
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError> + 'static,
{
    Case {
        group,
        name,
        inputs,
        f: Box::new(f),
    }
}

pub fn cases() -> Vec<Case> {
    let mut out = Vec::new();

    let mut r = rng(1);
    let a = randn(&mut r, &[2, 3, 4]);
    let w = randn(&mut r, &[4, 5]);
    let b = randn(&mut r, &[2, 4, 3]);
    out.push(case("matmul", "matmul shared", vec![a.clone(), w], |g, v| project(g, v[0].matmul(v[1])?, 10)));
    out.push(case("matmul", "matmul batched", vec![a, b], |g, v| project(g, v[0].matmul(v[1])?, 11)));

    let mut r = rng(2);
    let a = randn(&mut r, &[3, 4]);
    let bias = randn(&mut r, &[4]);
    let col = randn(&mut r, &[3, 1]);
    out.push(case("arith", "add", vec![a.clone(), bias], |g, v| project(g, v[0].add(v[1])?, 20)));
    out.push(case("arith", "sub", vec![a.clone(), col.clone()], |g, v| project(g, v[0].sub(v[1])?, 21)));
    out.push(case("arith", "mul", vec![a.clone(), col], |g, v| project(g, v[0].mul(v[1])?, 22)));
    out.push(case("arith", "mul same", vec![a.clone(), a.clone()], |g, v| project(g, v[0].mul(v[1])?, 23)));
    out.push(case("arith", "scale/shift", vec![a], |g, v| project(g, v[0].scale(-1.7)?.add_scalar(0.3)?, 24)));

    let mut r = rng(3);
    let x = randn(&mut r, &[5, 3]);
    let pos = uniform(&mut r, &[5, 3], 0.5, 3.0);
    out.push(case("pointwise", "exp", vec![x.clone()], |g, v| project(g, v[0].exp()?, 30)));
    out.push(case("pointwise", "log", vec![pos], |g, v| project(g, v[0].log()?, 31)));
    out.push(case("pointwise", "silu", vec![x.clone()], |g, v| project(g, v[0].silu()?, 32)));
    out.push(case("pointwise", "sigmoid", vec![x], |g, v| project(g, v[0].sigmoid()?, 33)));

    let mut r = rng(4);
    let x = randn(&mut r, &[4, 6]);
    let gamma = randn(&mut r, &[6]);
    let beta = randn(&mut r, &[6]);
    out.push(case("rows", "softmax", vec![x.clone()], |g, v| project(g, v[0].softmax()?, 40)));
    out.push(case("rows", "logsumexp", vec![x.clone()], |g, v| project(g, v[0].logsumexp()?, 41)));
    out.push(case("rows", "layer_norm", vec![x.clone(), gamma, beta], |g, v| {
        project(g, v[0].layer_norm(v[1], v[2], 1e-5)?, 42)
    }));
    out.push(case("rows", "l2_normalize", vec![x], |g, v| project(g, v[0].l2_normalize()?, 43)));

    let x = randn(&mut rng(5), &[3, 5]);
    out.push(case("dropout", "dropout", vec![x], |g, v| project(g, v[0].dropout(0.3, 99)?, 50)));

    let mut r = rng(6);
    let a = randn(&mut r, &[2, 3, 4]);
    let b = randn(&mut r, &[2, 2, 4]);
    let c = randn(&mut r, &[3, 1]);
    out.push(case("shape", "concat", vec![a.clone(), b], |g, v| project(g, g.concat(&[v[0], v[1]], 1)?, 60)));
    out.push(case("shape", "slice", vec![a.clone()], |g, v| project(g, v[0].slice(2, 1, 3)?, 61)));
    out.push(case("shape", "permute", vec![a.clone()], |g, v| project(g, v[0].permute(&[2, 0, 1])?, 62)));
    out.push(case("shape", "transpose", vec![a.clone()], |g, v| project(g, v[0].transpose(1, 2)?, 63)));
    out.push(case("shape", "reshape", vec![a], |g, v| project(g, v[0].reshape(&[6, 4])?, 64)));
    out.push(case("shape", "broadcast_to", vec![c], |g, v| project(g, v[0].broadcast_to(&[2, 3, 4])?, 65)));

    let a = randn(&mut rng(7), &[3, 4, 2]);
    out.push(case("reduce", "sum_axis", vec![a.clone()], |g, v| project(g, v[0].sum_axis(1)?, 70)));
    out.push(case("reduce", "mean_axis", vec![a.clone()], |g, v| project(g, v[0].mean_axis(0)?, 71)));
    out.push(case("reduce", "sum", vec![a.clone()], |_, v| v[0].sum()));
    out.push(case("reduce", "mean", vec![a.clone()], |g, v| project(g, v[0].exp()?, 72)?.add(v[0].mean()?)));
    out.push(case("reduce", "max_axis", vec![a], |g, v| project(g, v[0].max_axis(1)?, 73)));

    let mut r = rng(8);
    let x = randn(&mut r, &[2, 3, 4]);
    let tok = randn(&mut r, &[4]);
    out.push(case("mask", "mask_rows", vec![x, tok], |g, v| {
        project(g, v[0].mask_rows(v[1], &[true, false, false, true, true, false])?, 80)
    }));

    let mut r = rng(9);
    let x = randn(&mut r, &[3, 4]);
    let w = randn(&mut r, &[4, 4]);
    let gamma = randn(&mut r, &[4]);
    let beta = randn(&mut r, &[4]);
    out.push(case("composite", "composite", vec![x, w, gamma, beta], |g, v| {
        let h = v[0].matmul(v[1])?.silu()?.layer_norm(v[2], v[3], 1e-5)?;
        let s = h.matmul(h.transpose(0, 1)?)?.softmax()?;
        project(g, s.matmul(h)?.l2_normalize()?, 90)
    }));

    out
}
