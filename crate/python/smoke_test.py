"""Smoke test for the sgkit_py extension module."""

import math
import tempfile

import sgkit_py as sg


def check_surrogates():
    assert len(sg.shapes()) == 7
    for name in sg.shapes():
        f = sg.Surrogate(name)
        assert abs(f(0.3) - f(-0.3)) < 1e-12, name
        assert f.area() > 0.0
    fast = sg.Surrogate("dfastsigmoid")
    q2 = sg.Surrogate("qpseudospike", q=2.0)
    assert abs(fast(0.7) - q2(0.7)) < 1e-12
    damp = sg.Surrogate("exponential", gamma=0.5)
    assert abs(damp(0.2) - 0.5 * sg.Surrogate("exponential")(0.2)) < 1e-15
    assert sg.heaviside(0.1) == 1.0 and sg.heaviside(-0.1) == 0.0


def check_conditions():
    st = sg.LayerStats.data(40, 64, 0.9, 1.0, 0.5, 0.25)
    m = st.cond1_mean_wrec()
    assert math.isfinite(m)
    assert math.isfinite(st.cond2_var_wrec(m))
    s, moment, feasible = sg.solve_sharpness("exponential", 1.0, 0.05, -2.0, 3.0, 1.0)
    assert feasible and abs(moment - 0.05) / 0.05 < 1e-3 and s > 0.0


def check_latency():
    assert sg.latency_encode(0.1) is None
    t = sg.latency_encode(1.0, theta=0.2, tau=50.0)
    assert abs(t - 50.0 * math.log(1.0 / 0.8)) < 1e-12


def check_pipeline():
    cfg = sg.Config(**{"model.n_rec": 16, "task.n_train": 40, "task.n_val": 20, "train.epochs": 2})
    assert sg.Config.parse(cfg.to_text()).to_text() == cfg.to_text()
    layers = sg.init_solve(cfg)
    assert len(layers) == 2 and all("feasible" in l for l in layers)
    hist = sg.train(cfg)
    assert len(hist) == 2
    assert all(math.isfinite(r["val_loss"]) for r in hist)
    assert sg.train(cfg) == hist
    cfg.set("probe.steps", "20")
    cfg.set("probe.samples", "2")
    rows = sg.probe(cfg)
    assert len(rows) == 20 * 2
    try:
        cfg.set("model.alpha", "1.0")
        cfg.validate()
    except ValueError:
        pass
    else:
        raise AssertionError("alpha = 1 accepted")
    cfg.set("model.alpha", "0.9")
    strict = sg.Config(**{"init.on_infeasible": "fail"})
    try:
        sg.init_solve(strict)
    except sg.InfeasibleError:
        pass
    else:
        raise AssertionError("default setup reported feasible")


def main():
    check_surrogates()
    check_conditions()
    check_latency()
    check_pipeline()
    print("smoke test passed")


if __name__ == "__main__":
    main()
