"""Tour of the tensor engine: tape-based gradients checked against stencils.

Builds a few computations out of the engine's primitives, runs reverse-mode
backward passes, and verifies every gradient with central finite
differences. Ends with the engine's own audit helper on an LSTM cell and on
a miniature encode-decode composition.

Run: python3 demos/demo_autodiff.py [--seed N]
"""

import argparse

import numpy as np

from dpae import tensor as T
from dpae import training as TR
from dpae.model import DPAE, ModelProfile


def scalar_chain(seed):
    print("== a scalar chain, differentiated by hand and by tape ==")
    w = T.Parameter(np.array([[0.7]]), "w")
    # f(w) = mean((tanh(w^2))^2); hand derivative via chain rule.
    out = T.mean_all(T.square(T.tanh(T.square(w))))
    T.zero_grads({"w": w})
    T.backward(out)
    x = 0.7
    th = np.tanh(x * x)
    hand = 2.0 * th * (1.0 - th * th) * 2.0 * x
    print(f"   f(w) = {out.data.item():.10f}")
    print(f"   tape dL/dw = {w.grad.item():+.10f}")
    print(f"   hand dL/dw = {hand:+.10f}")
    print(f"   agreement  = {abs(w.grad.item() - hand):.2e}\n")


def attention_style_block(seed):
    print("== gradients through a softmax attention pattern ==")
    rng = np.random.default_rng(seed)
    q = T.Parameter(rng.normal(size=(4, 6)), "q")
    k = T.Parameter(rng.normal(size=(4, 6)), "k")
    v = T.Parameter(rng.normal(size=(4, 6)), "v")
    params = {"q": q, "k": k, "v": v}

    def f():
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(6.0))
        return T.mean_all(T.square(T.matmul(T.softmax_rows(scores), v)))

    err = T.grad_check(f, params, eps=1e-5)
    print(f"   max relative error vs finite differences: {err:.3e}\n")


def lstm_cell_check(seed):
    print("== fused LSTM cell ==")
    rng = np.random.default_rng(seed)
    hidden = 5
    params = {
        "x": T.Parameter(rng.normal(size=(1, 3)), "x"),
        "h": T.Parameter(0.1 * rng.normal(size=(1, hidden)), "h"),
        "c": T.Parameter(0.1 * rng.normal(size=(1, hidden)), "c"),
        "w_ih": T.Parameter(rng.normal(size=(3, 4 * hidden)) / 2.0, "w_ih"),
        "w_hh": T.Parameter(rng.normal(size=(hidden, 4 * hidden)) / 2.0,
                            "w_hh"),
        "bias": T.Parameter(np.zeros((1, 4 * hidden)), "bias"),
    }

    def f():
        out = T.lstm_cell(params["x"], params["h"], params["c"],
                          params["w_ih"], params["w_hh"], params["bias"])
        return T.mean_all(T.square(out))

    err = T.grad_check(f, params, eps=1e-5)
    print(f"   max relative error across all 6 tensors: {err:.3e}\n")


def full_composition(seed):
    print("== miniature autoencoder, end to end ==")
    profile = ModelProfile(p=12, l=2, m=3, depth_enc=1, depth_dec=1,
                           heads=2, latent_dim=5, lstm_hidden=4,
                           head_widths=(4, 4))
    model = DPAE(profile, seed=seed)
    x = np.random.default_rng(seed + 1).uniform(size=(12, 2))

    def f():
        recon, _, _ = model.reconstruct(x)
        return TR.mse_loss(x, recon)

    err = T.grad_check(f, model.params, eps=1e-5, entries_per_param=2,
                       order=4)
    n = sum(p.data.size for p in model.params.values())
    print(f"   {len(model.params)} tensors, {n} scalar parameters")
    print(f"   encode -> decode -> MSE, max relative error: {err:.3e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    scalar_chain(args.seed)
    attention_style_block(args.seed)
    lstm_cell_check(args.seed)
    full_composition(args.seed)


if __name__ == "__main__":
    main()
