import json

import numpy as np
import pytest

from dadpo.corpus import build_datasets
from dadpo.losses import sft_loss
from dadpo.pipeline import (
    Distiller,
    PipelineError,
    PreferenceTrainer,
    RunConfig,
    RunManifest,
    SftTrainer,
    distill,
    run_dsft,
    run_preference_stage,
    sweep_preference,
)
from dadpo.policy import DecodeConfig, load_policy
from dadpo.worlds import make_world


@pytest.fixture(scope="module")
def world():
    return make_world(seed=0, vocab_size=4, max_len=3, n_train=12, n_eval=4, student_dim=4)


@pytest.fixture(scope="module")
def datasets(world):
    cfg = DecodeConfig(mode="greedy", seed=0, max_len=3)
    return build_datasets(world.train_prompts, world.teacher, world.student, cfg)


class TestSftTrainer:
    def test_zero_epochs_returns_input(self, world, datasets):
        sft_pairs, _ = datasets
        tr = SftTrainer(epochs=0, seed=0).fit(sft_pairs, init_policy=world.student)
        assert np.array_equal(tr.policy_.parameters, world.student.parameters)
        assert tr.n_epochs_run_ == 0

    def test_loss_non_increasing_tabular(self, world, datasets):
        sft_pairs, _ = datasets
        # convex case: plain GD on a tabular student
        from dadpo.policy import TabularPolicy

        ids = [p.id for p in world.train_prompts + world.eval_prompts]
        student = TabularPolicy(world.vocab, world.space, ids, np.zeros((len(ids), world.space.size)))
        tr = SftTrainer(epochs=50, lr=1e-2, optimizer="sgd", seed=0).fit(sft_pairs, init_policy=student)
        curve = np.asarray(tr.loss_curve_)
        assert np.all(curve[1:] <= curve[:-1] + 1e-6)

    def test_tabular_convex_reaches_near_zero(self, world, datasets):
        sft_pairs, _ = datasets
        from dadpo.policy import TabularPolicy

        ids = [p.id for p in world.train_prompts + world.eval_prompts]
        student = TabularPolicy(world.vocab, world.space, ids, np.zeros((len(ids), world.space.size)))
        tr = SftTrainer(epochs=4000, lr=1.0, optimizer="sgd", plateau_tol=0.0).fit(
            sft_pairs[:3], init_policy=student
        )
        assert sft_loss(tr.policy_, sft_pairs[:3]).total < 0.01

    def test_determinism_bit_equal(self, world, datasets):
        sft_pairs, _ = datasets
        a = SftTrainer(epochs=20, seed=5).fit(sft_pairs, init_policy=world.student)
        b = SftTrainer(epochs=20, seed=5).fit(sft_pairs, init_policy=world.student)
        assert np.array_equal(a.policy_.parameters, b.policy_.parameters)
        assert a.loss_curve_ == b.loss_curve_

    def test_requires_init_policy(self, datasets):
        sft_pairs, _ = datasets
        with pytest.raises(ValueError, match="init_policy"):
            SftTrainer().fit(sft_pairs)


class TestPreferenceTrainer:
    def test_ref_frozen_bitwise(self, world, datasets):
        _, triplets = datasets
        before = world.student.parameters
        tr = PreferenceTrainer(method="dadpo", beta1=0.1, beta2=0.01, teacher=world.teacher,
                               epochs=15, seed=0).fit(triplets, init_policy=world.student)
        assert np.array_equal(tr.ref_policy_.parameters, before)
        assert tr.ref_policy_ is world.student

    def test_reduction_trajectories_bit_equal(self, world, datasets):
        _, triplets = datasets
        kw = dict(teacher=world.teacher, epochs=12, seed=7, lr=0.05)
        a = PreferenceTrainer(method="ddpo", beta=0.1, **kw).fit(triplets, init_policy=world.student)
        b = PreferenceTrainer(method="dadpo", beta1=0.1, beta2=0.0, **kw).fit(triplets, init_policy=world.student)
        assert np.array_equal(a.policy_.parameters, b.policy_.parameters)
        assert a.loss_curve_ == b.loss_curve_
        c = PreferenceTrainer(method="rdpo", beta=0.1, **kw).fit(triplets, init_policy=world.student)
        d = PreferenceTrainer(method="dadpo", beta1=0.0, beta2=0.1, **kw).fit(triplets, init_policy=world.student)
        assert np.array_equal(c.policy_.parameters, d.policy_.parameters)

    def test_margin_growth_on_two_response_task(self):
        # teacher strictly prefers response A on every prompt: after training
        # the policy's probability of A must rise above the reference's
        import math
        from dadpo.corpus import PreferenceTriplet, Prompt, Response, Vocab
        from dadpo.policy import ResponseSpace, TabularPolicy

        v = Vocab.build(2)
        space = ResponseSpace([Response(tokens=(0,)), Response(tokens=(1, 0))])
        prompts = [Prompt(id=f"p{i}", tokens=(1,)) for i in range(4)]
        ids = [p.id for p in prompts]
        student = TabularPolicy(v, space, ids, np.zeros((4, 2)))
        teacher = TabularPolicy(v, space, ids, np.tile([2.0, -2.0], (4, 1)))
        triplets = [
            PreferenceTriplet(prompt=p, winner=space.responses[0], loser=space.responses[1])
            for p in prompts
        ]
        tr = PreferenceTrainer(method="dadpo", beta1=0.5, beta2=0.5, teacher=teacher,
                               epochs=200, lr=0.5, seed=0).fit(triplets, init_policy=student)
        for p in prompts:
            after = math.exp(tr.policy_.sentence_logprob(p, space.responses[0]))
            before = math.exp(student.sentence_logprob(p, space.responses[0]))
            assert after > before

    def test_loss_curve_decreases_overall(self, world, datasets):
        _, triplets = datasets
        tr = PreferenceTrainer(method="dadpo", beta1=0.1, beta2=0.1, teacher=world.teacher,
                               epochs=30, lr=0.05, seed=0).fit(triplets, init_policy=world.student)
        assert tr.loss_curve_[-1] < tr.loss_curve_[0]

    def test_empty_triplets_rejected(self, world):
        with pytest.raises(ValueError, match="non-empty"):
            PreferenceTrainer(method="ddpo", teacher=world.teacher).fit([], init_policy=world.student)

    def test_methods_requiring_teacher(self, world, datasets):
        _, triplets = datasets
        with pytest.raises(ValueError, match="teacher"):
            PreferenceTrainer(method="dadpo").fit(triplets, init_policy=world.student)


class TestRunConfig:
    def test_defaults_match_published_grids(self):
        cfg = RunConfig()
        assert cfg.beta1_grid == (0.01, 0.1, 1.0)
        assert cfg.beta2_grid == (0.001, 0.01, 0.1, 1.0)
        assert cfg.kl_weight_grid == (0.1, 0.2, 0.4)

    def test_cells_deterministic_order(self):
        cfg = RunConfig(method="dadpo", beta1_grid=(0.1, 1.0), beta2_grid=(0.01, 0.1))
        cells = cfg.cells()
        assert len(cells) == 4
        assert cells == sorted(cells, key=lambda c: (c["beta1"], c["beta2"]))

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="method"):
            RunConfig(method="ppo")

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            RunConfig(beta_grid=())

    def test_from_file_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "method = dadpo\n"
            "beta1_grid = 0.1,1.0\n"
            "beta2_grid = 0.01\n"
            "sft_epochs = 25\n"
            "pref_epochs = 30\n"
            "seed = 3\n"
            "max_len = 3\n"
            "# comment line\n"
            "pref_lr = 0.05\n",
            encoding="utf-8",
        )
        cfg = RunConfig.from_file(path)
        assert cfg.method == "dadpo"
        assert cfg.beta1_grid == (0.1, 1.0)
        assert cfg.beta2_grid == (0.01,)
        assert cfg.sft_epochs == 25
        assert cfg.pref_lr == 0.05

    def test_from_file_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("methodd = dadpo\n", encoding="utf-8")
        with pytest.raises(ValueError, match="unknown key"):
            RunConfig.from_file(path)


class TestDistiller:
    def test_teacher_equals_student_skips_preference(self, world):
        d = Distiller(teacher=world.teacher, student=world.teacher, method="dadpo",
                      max_len=3, sft_epochs=2, pref_epochs=5, seed=0).fit(world.train_prompts)
        assert d.triplets_ == []
        assert d.n_dropped_ == len(world.train_prompts)
        assert d.manifest_.stages["preference"] == {"skipped": "no_triplets"}
        assert np.array_equal(d.policy_.parameters, d.dsft_policy_.parameters)

    def test_full_run_emits_checkpoints(self, world, tmp_path):
        d = Distiller(teacher=world.teacher, student=world.student, method="dadpo",
                      beta1=0.1, beta2=0.01, max_len=3, sft_epochs=10, pref_epochs=10,
                      seed=0).fit(world.train_prompts)
        out = d.save_run(tmp_path)
        manifest = RunManifest.load(out / "manifest.json")
        assert set(manifest.checkpoints) == {"dsft", "final", "ref"}
        for name, entry in manifest.checkpoints.items():
            pol = load_policy(entry["path"], expected_vocab=world.vocab)
            assert pol.vocab.hash_hex() == world.vocab.hash_hex()
        assert (out / "sft.jsonl").exists() and (out / "triplets.jsonl").exists()

    def test_rerun_identical_parameters(self, world):
        kw = dict(teacher=world.teacher, student=world.student, method="dadpo",
                  beta1=0.1, beta2=0.1, max_len=3, sft_epochs=8, pref_epochs=8, seed=11)
        a = Distiller(**kw).fit(world.train_prompts)
        b = Distiller(**kw).fit(world.train_prompts)
        assert np.array_equal(a.policy_.parameters, b.policy_.parameters)
        assert a.manifest_.config_hash == b.manifest_.config_hash
        assert a.manifest_.dataset_hashes == b.manifest_.dataset_hashes
        assert a.manifest_.loss_curves == b.manifest_.loss_curves

    def test_stage_isolation_ref_untouched(self, world):
        d = Distiller(teacher=world.teacher, student=world.student, method="ddpo",
                      beta=0.1, max_len=3, sft_epochs=8, pref_epochs=8, seed=0).fit(world.train_prompts)
        assert np.array_equal(d.ref_policy_.parameters, d.dsft_policy_.parameters)

    def test_functions_wrap_estimators(self, world, datasets):
        sft_pairs, triplets = datasets
        cfg = RunConfig(method="dadpo", beta1_grid=(0.1,), beta2_grid=(0.01,),
                        sft_epochs=5, pref_epochs=5, seed=0, max_len=3)
        pi_dsft = run_dsft(world.student, sft_pairs, cfg)
        final = run_preference_stage(pi_dsft, world.teacher, triplets, cfg)
        manifest, policy = distill(world.train_prompts, world.teacher, world.student, cfg)
        assert np.array_equal(policy.parameters, final.parameters)
        assert manifest.method == "dadpo"

    def test_manifest_round_trip(self, world, tmp_path):
        cfg = RunConfig(method="rdpo", beta_grid=(0.1,), sft_epochs=3, pref_epochs=3,
                        seed=0, max_len=3)
        manifest, _ = distill(world.train_prompts, world.teacher, world.student, cfg)
        path = manifest.save(tmp_path / "m.json")
        back = RunManifest.load(path)
        assert back == manifest


class TestSweep:
    def test_sweep_shares_dsft_and_orders_cells(self, world):
        cfg = RunConfig(method="dadpo", beta1_grid=(0.1,), beta2_grid=(0.001, 0.01),
                        sft_epochs=5, pref_epochs=5, seed=0, max_len=3)
        pi_dsft, results = sweep_preference(world.train_prompts, world.teacher, world.student, cfg)
        assert [r.params for r in results] == [
            {"beta1": 0.1, "beta2": 0.001},
            {"beta1": 0.1, "beta2": 0.01},
        ]
        for r in results:
            assert r.manifest.loss_curves["dsft"] == results[0].manifest.loss_curves["dsft"]
            assert r.manifest.stages["preference"]["betas"] == [r.params["beta1"], r.params["beta2"]]

    def test_sweep_requires_preference_method(self, world):
        cfg = RunConfig(method="dsft", sft_epochs=2, max_len=3)
        with pytest.raises(ValueError, match="preference method"):
            sweep_preference(world.train_prompts, world.teacher, world.student, cfg)
