//! Post-LN transformer blocks on the tape.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{xavier_uniform, Binding, ParamStore, Tape, Tensor, Var};

pub(crate) fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert(format!("{p}.w"), xavier_uniform(rng, fan_in, fan_out));
    store.insert(format!("{p}.b"), Tensor::zeros(1, fan_out));
}

pub(crate) fn linear(tape: &mut Tape, bind: Binding<'_>, p: &str, x: Var) -> Var {
    let w = bind.get(tape, &format!("{p}.w"));
    let b = bind.get(tape, &format!("{p}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn init_norm(store: &mut ParamStore, p: &str, d: usize) {
    store.insert(format!("{p}.g"), Tensor::filled(1, d, 1.0));
    store.insert(format!("{p}.b"), Tensor::zeros(1, d));
}

/// `LN(x + y)` with learned gain and bias.
fn add_norm(tape: &mut Tape, bind: Binding<'_>, p: &str, x: Var, y: Var) -> Var {
    let s = tape.add(x, y);
    let n = tape.layer_norm(s);
    let g = bind.get(tape, &format!("{p}.g"));
    let b = bind.get(tape, &format!("{p}.b"));
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, d: usize, rng: &mut R) {
    for m in ["q", "k", "v", "o"] {
        if m == "k" {
            // no key bias: it shifts a whole score row and cancels in the softmax
            store.insert(format!("{p}.k.w"), xavier_uniform(rng, d, d));
        } else {
            init_linear(store, &format!("{p}.{m}"), d, d, rng);
        }
    }
}

/// Multi-head scaled dot-product attention of `xq` rows over `xkv` rows.
/// `mask` is row-major `[rows(xq), rows(xkv)]`; `false` blocks a pair.
pub(crate) fn attention(
    tape: &mut Tape,
    bind: Binding<'_>,
    p: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    mask: Option<Rc<[bool]>>,
) -> Var {
    let d = tape.value(xq).cols();
    let dh = d / heads;
    let q = linear(tape, bind, &format!("{p}.q"), xq);
    let kw = bind.get(tape, &format!("{p}.k.w"));
    let k = tape.matmul(xkv, kw);
    let v = linear(tape, bind, &format!("{p}.v"), xkv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores, mask.clone());
        outs.push(tape.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    linear(tape, bind, &format!("{p}.o"), cat)
}

fn init_ffn<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, d: usize, hidden: usize, rng: &mut R) {
    init_linear(store, &format!("{p}.up"), d, hidden, rng);
    init_linear(store, &format!("{p}.down"), hidden, d, rng);
}

fn ffn(tape: &mut Tape, bind: Binding<'_>, p: &str, x: Var) -> Var {
    let h = linear(tape, bind, &format!("{p}.up"), x);
    let h = tape.gelu(h);
    linear(tape, bind, &format!("{p}.down"), h)
}

pub(crate) fn init_encoder_layer<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, d: usize, hidden: usize, rng: &mut R) {
    init_attention(store, &format!("{p}.attn"), d, rng);
    init_norm(store, &format!("{p}.ln1"), d);
    init_ffn(store, &format!("{p}.ffn"), d, hidden, rng);
    init_norm(store, &format!("{p}.ln2"), d);
}

pub(crate) fn encoder_layer(tape: &mut Tape, bind: Binding<'_>, p: &str, x: Var, heads: usize) -> Var {
    let a = attention(tape, bind, &format!("{p}.attn"), x, x, heads, None);
    let x = add_norm(tape, bind, &format!("{p}.ln1"), x, a);
    let f = ffn(tape, bind, &format!("{p}.ffn"), x);
    add_norm(tape, bind, &format!("{p}.ln2"), x, f)
}

pub(crate) fn init_decoder_layer<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, d: usize, hidden: usize, rng: &mut R) {
    init_attention(store, &format!("{p}.self"), d, rng);
    init_norm(store, &format!("{p}.ln1"), d);
    init_attention(store, &format!("{p}.cross"), d, rng);
    init_norm(store, &format!("{p}.ln2"), d);
    init_ffn(store, &format!("{p}.ffn"), d, hidden, rng);
    init_norm(store, &format!("{p}.ln3"), d);
}

/// Lower-triangular `[n, n]` mask: row `i` sees columns `0..=i`.
pub(crate) fn causal_mask(n: usize) -> Rc<[bool]> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m.into()
}

pub(crate) fn decoder_layer(
    tape: &mut Tape,
    bind: Binding<'_>,
    p: &str,
    x: Var,
    memory: Var,
    heads: usize,
    causal: Rc<[bool]>,
) -> Var {
    let a = attention(tape, bind, &format!("{p}.self"), x, x, heads, Some(causal));
    let x = add_norm(tape, bind, &format!("{p}.ln1"), x, a);
    let c = attention(tape, bind, &format!("{p}.cross"), x, memory, heads, None);
    let x = add_norm(tape, bind, &format!("{p}.ln2"), x, c);
    let f = ffn(tape, bind, &format!("{p}.ffn"), x);
    add_norm(tape, bind, &format!("{p}.ln3"), x, f)
}
