use super::layers::{silu, silu_backward, upsample2, upsample2_backward, Conv2d};
use super::Real;
use crate::grid::Grid;

/// One stage of a plain feed-forward stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv(Conv2d),
    Silu,
    Tanh,
    Upsample2,
}

/// A linear chain of [`Op`]s.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Seq {
    pub ops: Vec<Op>,
}

/// Activations recorded by [`Seq::forward_trace`]: the input of every op
/// plus the final output.
#[derive(Clone, Debug)]
pub struct SeqTrace<T> {
    pub acts: Vec<Grid<T>>,
}

impl<T: Clone> SeqTrace<T> {
    pub fn output(&self) -> &Grid<T> {
        self.acts.last().expect("trace holds at least the input")
    }
}

fn apply<T: Real>(op: &Op, p: &[T], x: &Grid<T>) -> Grid<T> {
    match op {
        Op::Conv(c) => c.forward(p, x),
        Op::Silu => Grid {
            c: x.c,
            h: x.h,
            w: x.w,
            data: silu(&x.data),
        },
        Op::Tanh => Grid {
            c: x.c,
            h: x.h,
            w: x.w,
            data: x.data.iter().map(|v| v.tanh()).collect(),
        },
        Op::Upsample2 => upsample2(x),
    }
}

impl Seq {
    pub fn push(&mut self, op: Op) {
        self.ops.push(op);
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Grid<T>) -> Grid<T> {
        let mut cur = x.clone();
        for op in &self.ops {
            cur = apply(op, p, &cur);
        }
        cur
    }

    pub fn forward_trace<T: Real>(&self, p: &[T], x: &Grid<T>) -> SeqTrace<T> {
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        acts.push(x.clone());
        for op in &self.ops {
            let next = apply(op, p, acts.last().unwrap());
            acts.push(next);
        }
        SeqTrace { acts }
    }

    /// Backpropagates `dy` through the stack. Parameter gradients are
    /// accumulated only when `grads` is given.
    pub fn backward<T: Real>(&self, p: &[T], trace: &SeqTrace<T>, dy: Grid<T>, mut grads: Option<&mut [T]>) -> Grid<T> {
        let mut d = dy;
        for (i, op) in self.ops.iter().enumerate().rev() {
            let x = &trace.acts[i];
            d = match op {
                Op::Conv(c) => c.backward(p, x, &d, grads.as_deref_mut()),
                Op::Silu => Grid {
                    c: d.c,
                    h: d.h,
                    w: d.w,
                    data: silu_backward(&x.data, &d.data),
                },
                Op::Tanh => {
                    let y = &trace.acts[i + 1];
                    Grid {
                        c: d.c,
                        h: d.h,
                        w: d.w,
                        data: y.data.iter().zip(&d.data).map(|(&v, &g)| g * (T::one() - v * v)).collect(),
                    }
                }
                Op::Upsample2 => upsample2_backward(&d),
            };
        }
        d
    }
}
