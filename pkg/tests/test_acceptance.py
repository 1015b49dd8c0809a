"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured margin."""

import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from fedsig.data import (
    Label,
    RawSignature,
    load_corpus,
    merge_corpora,
    preprocess,
    preprocess_corpus,
    split_train_test,
    synth_generate,
)
from fedsig.federated import AgentState, FedConfig, aggregate, local_training, run_federated
from fedsig.harness import ExperimentConfig, apply_desk_preset, run_experiment
from fedsig.layers import softmax_crossentropy
from fedsig.metrics import ScoreSet, evaluate, roc_and_eer
from fedsig.network import (
    Batch,
    ModelConfig,
    backward,
    build_model,
    flatten_params,
    forward,
    param_layout,
    unflatten_params,
)
from fedsig.optim import sgd_step

from conftest import central_difference, max_relative_error
from test_metrics import brute_force_eer, brute_force_rates

SHRUNK = ModelConfig(kernel_size=3, channel_widths=(2, 3, 4), max_length=16, seed=0)


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE [{name}]: FAIL")
        raise
    print(f"ACCEPTANCE [{name}]: PASS")


def test_gradient_correctness():
    with criterion("gradient correctness"):
        start = time.time()
        worst = 0.0
        for seed in range(5):
            cfg = SHRUNK.with_overrides(seed=seed)
            params = build_model(cfg)
            rng = np.random.default_rng(seed + 100)
            batch = Batch(rng.normal(size=(3, 2, 16)), rng.integers(0, 2, size=3))

            logits, caches, _ = forward(params, batch.inputs, cfg, train=True)
            _, grad_logits, _ = softmax_crossentropy(logits, batch.labels)
            grads = backward(params, caches, grad_logits)

            for name in params.trainable_names:
                def loss_with(tensor, name=name):
                    logits2, _, _ = forward(params.replace({name: tensor}), batch.inputs, cfg, train=True)
                    loss, _, _ = softmax_crossentropy(logits2, batch.labels)
                    return loss

                fd = central_difference(loss_with, params[name], h=1e-5)
                worst = max(worst, max_relative_error(grads[name], fd))
        elapsed = time.time() - start
        assert worst < 1e-4, f"max relative error {worst}"
        assert elapsed < 30.0, f"took {elapsed:.1f}s"
        print(f"  max rel err {worst:.2e} over 5 seeds in {elapsed:.1f}s", end="; ")


def test_federated_reduction():
    with criterion("federated reduction"):
        start = time.time()
        corpus = synth_generate(4, 6, 6, (8, 16), seed=21, max_length=16)
        train_c, test_c = split_train_test(corpus, 4, seed=0)
        train = preprocess_corpus(train_c.all_signatures(), 16)
        test = preprocess_corpus(test_c.all_signatures(), 16)

        cfg = FedConfig(model=SHRUNK, num_agents=1, local_epochs=1, iterations=50,
                        local_batch_size=len(train), learning_rate=0.05, master_seed=4)
        history = run_federated(cfg, [train], test)

        # centralized oracle: plain full-batch SGD in natural data order
        params = build_model(SHRUNK)
        inputs = np.stack([s.channels for s in train])
        labels = np.array([int(s.label) for s in train])
        agent = AgentState(0, train)
        fed_params = build_model(SHRUNK)
        worst = 0.0
        for iteration in range(1, 51):
            logits, caches, stats = forward(params, inputs, SHRUNK, train=True)
            _, grad_logits, _ = softmax_crossentropy(logits, labels)
            params = sgd_step(params, backward(params, caches, grad_logits), 0.05).replace(stats)

            updated, _ = local_training(
                agent, fed_params, SHRUNK, epochs=1, batch_size=len(train),
                lr=0.05, seed=cfg.agent_seed(0, iteration),
            )
            fed_params = aggregate([(updated, agent.size)])
            worst = max(worst, np.abs(flatten_params(fed_params) - flatten_params(params)).max())
        elapsed = time.time() - start
        assert worst < 1e-12, f"trajectory diverged by {worst}"
        final_gap = np.abs(flatten_params(history.final_params) - flatten_params(fed_params)).max()
        assert final_gap == 0.0, "run_federated disagrees with the primitive loop"
        assert elapsed < 60.0, f"took {elapsed:.1f}s"
        print(f"  worst trajectory diff {worst:.2e} over 50 iterations in {elapsed:.1f}s", end="; ")


def test_aggregation_oracle():
    with criterion("aggregation oracle"):
        rng = np.random.default_rng(77)
        size = sum(int(np.prod(s)) for _, s in param_layout(SHRUNK))
        for _ in range(100):
            k = int(rng.integers(1, 9))
            sizes = [int(rng.integers(1, 100)) for _ in range(k)]
            contributions = [
                (unflatten_params(rng.normal(size=size), SHRUNK), s) for s in sizes
            ]
            merged = aggregate(contributions)
            total = sum(sizes)
            for name in merged.names:
                oracle = sum(p[name] * (s / total) for p, s in contributions)
                assert np.abs(merged[name] - oracle).max() < 1e-15
            perm = rng.permutation(k)
            assert aggregate([contributions[i] for i in perm]) == merged, "permutation changed bits"


def test_eer_oracle(rng):
    with criterion("EER oracle"):
        start = time.time()
        for genuine, forged, expected in (
            ([0.8, 0.9, 0.95], [0.1, 0.2, 0.3], 0.0),
            ([0.2, 0.6], [0.2, 0.6], 0.5),
            ([0.9, 0.8, 0.3], [0.7, 0.2, 0.1], 1 / 3),
        ):
            scores = ScoreSet(
                genuine + forged,
                [1] * len(genuine) + [0] * len(forged),
                list(range(len(genuine) + len(forged))),
            )
            assert roc_and_eer(scores).eer == pytest.approx(expected, abs=1e-15)

        for _ in range(200):
            n_g = int(rng.integers(1, 32))
            n_f = int(rng.integers(1, 32))
            pool = np.round(rng.uniform(0, 1, 8), 2)
            scores = ScoreSet(
                np.concatenate([rng.uniform(0, 1, n_g), rng.choice(pool, max(1, n_g // 2)),
                                rng.uniform(0, 1, n_f), rng.choice(pool, max(1, n_f // 2))]),
                [1] * (n_g + max(1, n_g // 2)) + [0] * (n_f + max(1, n_f // 2)),
                list(range(n_g + n_f + max(1, n_g // 2) + max(1, n_f // 2))),
            )
            roc = roc_and_eer(scores)
            for t, far, frr in zip(roc.thresholds, roc.far, roc.frr):
                bf_far, bf_frr = brute_force_rates(scores, t)
                assert far == pytest.approx(bf_far, abs=1e-12)
                assert frr == pytest.approx(bf_frr, abs=1e-12)
            assert roc.eer == pytest.approx(brute_force_eer(scores), abs=1e-12)
        elapsed = time.time() - start
        assert elapsed < 10.0, f"took {elapsed:.1f}s"
        print(f"  200 score sets vs sweep oracle in {elapsed:.1f}s", end="; ")


def test_shape_contract():
    with criterion("shape contract"):
        cfg = ModelConfig()  # full-scale defaults
        assert cfg.length_trace() == [800, 400, 200, 100, 50]
        assert cfg.feature_dim == 6400
        params = build_model(cfg)
        assert params["head.weight"].shape == (6400, 2)
        assert params["head.bias"].shape == (2,)
        small = build_model(cfg.with_overrides(channel_widths=(4, 8, 16)))
        x = np.zeros((1, 2, 800))
        logits, caches, _ = forward(small, x, cfg.with_overrides(channel_widths=(4, 8, 16)), train=False)
        conv_lengths = [c.padded_input.shape[2] - 2 * c.pad for c in caches.conv]
        assert conv_lengths == [800, 400, 200]
        assert caches.flat_shape[2] == 50
        assert logits.shape == (1, 2)


def test_normalization_invariance(rng):
    with criterion("normalization invariance"):
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 60))
            sig = RawSignature(
                user_id=1, sample_index=1, label=Label.GENUINE,
                x=rng.integers(0, 8000, n), y=rng.integers(0, 8000, n),
                timestamp=np.arange(n), button_status=np.ones(n, dtype=int),
            )
            base = preprocess(sig, 64)
            scale = int(rng.integers(1, 10))
            dx, dy = (int(v) for v in rng.integers(-20000, 20000, 2))
            moved = RawSignature(
                user_id=1, sample_index=1, label=Label.GENUINE,
                x=sig.x * scale + dx, y=sig.y * scale + dy,
                timestamp=sig.timestamp, button_status=sig.button_status,
            )
            diff = np.abs(preprocess(moved, 64).channels - base.channels).max()
            worst = max(worst, diff)
        assert worst < 1e-12, f"invariance broke by {worst}"
        print(f"  worst deviation {worst:.2e} over 1000 signatures", end="; ")


def test_synthetic_end_to_end(tmp_path):
    # thresholds fixed after a calibration sweep: seeds 0/1/7 gave centralized
    # accuracy 0.9625-0.9875, EER <= 0.025, federated gap <= 2.5 points
    with criterion("synthetic end-to-end"):
        start = time.time()
        results = {}
        for mode in ("centralized", "federated"):
            raw = apply_desk_preset({}, "single-run")
            raw.update(kind="single-run", out=str(tmp_path / mode), seed=0,
                       figures=False, mode=mode)
            run_experiment(ExperimentConfig.from_dict(raw))
            results[mode] = json.loads((tmp_path / mode / "summary.json").read_text())["results"]
        cent, fed = results["centralized"], results["federated"]
        elapsed = time.time() - start
        assert cent["accuracy"] >= 0.90, cent
        assert cent["eer"] <= 0.10, cent
        gap = abs(cent["accuracy"] - fed["accuracy"])
        assert gap <= 0.05, f"federated accuracy gap {gap:.3f}"
        assert elapsed < 300.0, f"took {elapsed:.1f}s"
        print(
            f"  centralized acc={cent['accuracy']:.4f} eer={cent['eer']:.4f}, "
            f"federated acc={fed['accuracy']:.4f} (gap {gap * 100:.2f} pts) in {elapsed:.1f}s",
            end="; ",
        )


def test_determinism(tmp_path):
    with criterion("determinism"):
        raw = apply_desk_preset({}, "fl-local-epochs")
        raw.update(kind="fl-local-epochs", out=str(tmp_path / "run"), seed=9,
                   figures=False, instances=2, sweep=[1, 2])
        raw["fed"]["iterations"] = 2
        cfg = ExperimentConfig.from_dict(raw)
        run_experiment(cfg)
        first = {
            name: (tmp_path / "run" / name).read_bytes()
            for name in ("summary.json", "study.csv", "losses.csv")
        }
        run_experiment(cfg)
        for name, blob in first.items():
            assert (tmp_path / "run" / name).read_bytes() == blob, f"{name} changed between reruns"


SVC_TASK1 = os.environ.get("FEDSIG_SVC_TASK1")
SVC_TASK2 = os.environ.get("FEDSIG_SVC_TASK2")


@pytest.mark.skipif(
    not (SVC_TASK1 and SVC_TASK2),
    reason="SVC-2004 reproduction needs FEDSIG_SVC_TASK1 and FEDSIG_SVC_TASK2 "
    "pointing at the task directories (multi-hour run, not part of CI)",
)
def test_svc_reproduction():
    # Full-scale SVC-2004 run against the reference targets for this setup
    # (centralized EER 3.33% / accuracy 96.25%; FL within ~2.5 points of it).
    # Acceptance band: centralized EER <= 8%, accuracy >= 92%; each federated
    # run within 4 percentage points of the same-run centralized EER.
    with criterion("svc-2004 reproduction"):
        corpus = merge_corpora(load_corpus(SVC_TASK1, task=1), load_corpus(SVC_TASK2, task=2))
        assert len(corpus.user_ids) == 80 and len(corpus) == 3200

        from fedsig.harness import carve_federated_data
        from fedsig.training import train_epochs

        model_cfg = ModelConfig(kernel_size=61, seed=0)
        train_c, test_c = split_train_test(corpus, 16, seed=0)
        train = preprocess_corpus(train_c.all_signatures(), 800)
        test = preprocess_corpus(test_c.all_signatures(), 800)
        params = build_model(model_cfg)
        params, _ = train_epochs(params, train, model_cfg, optimizer="adamax",
                                 lr=0.01, epochs=200, batch_size=160, seed=(0, 1))
        _, roc = evaluate(params, test, model_cfg)
        print(f"  centralized: eer={roc.eer:.4f} acc={roc.accuracy_at_half:.4f}")
        assert roc.eer <= 0.08
        assert roc.accuracy_at_half >= 0.92

        for k in (2, 5, 10):
            fed_cfg = FedConfig(model=model_cfg, num_agents=k, local_epochs=15,
                                iterations=200, local_batch_size=32,
                                learning_rate=0.001, init_ratio=1.0, master_seed=0)
            carved = carve_federated_data(corpus, 16, k, 1.0, 800, seed=0)
            history = run_federated(fed_cfg, carved.partitions, carved.test_data,
                                    carved.init_data)
            fed_eer = history.records[-1].eer
            print(f"  federated K={k}: eer={fed_eer:.4f}")
            assert abs(fed_eer - roc.eer) <= 0.04
