import re

import numpy as np
import pytest

import oracles
import toyconfigs
from vtm import adaptation as adp
from vtm import datakit as dk
from vtm import trainer as tr
from vtm.errors import DataError, UsageError
from vtm.taskspace import TaskChannelSpec


@pytest.fixture(scope="module")
def ds():
    return dk.gen_synthetic(dk.default_families(), seed=17, count=10)


def small_cfg(**over):
    base = dict(total_steps=10, batch_episodes=1, channels_per_episode=2,
                support_size=2, query_size=2, crop=16, seed=0, augment=False)
    base.update(over)
    return tr.TrainConfig(**base)


class TestPolyLr:
    def test_endpoints(self):
        assert tr.poly_lr(0, 100, 1e-4) == 1e-4
        assert tr.poly_lr(100, 100, 1e-4) == 0.0

    def test_midpoint_value(self):
        lr = tr.poly_lr(50, 100, 1e-4, power=0.9)
        assert abs(lr - 5.35887e-5) < 1e-9
        assert lr == oracles.poly_lr(1e-4, 50, 100, 0.9)

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            tr.poly_lr(101, 100, 1e-4)
        with pytest.raises(UsageError):
            tr.poly_lr(-1, 100, 1e-4)


class TestSampleEpisode:
    def test_channel_count_and_distinct(self, ds):
        cfg = small_cfg(channels_per_episode=5, support_size=4, query_size=4)
        ep = tr.sample_episode(ds, cfg, np.random.default_rng(0))
        assert len(ep.specs) == 5
        assert len({s.key for s in ep.specs}) == 5
        train_keys = {s.key for s in ds.channel_specs("train")}
        assert all(s.key in train_keys for s in ep.specs)

    def test_support_query_disjoint(self, ds):
        cfg = small_cfg(support_size=4, query_size=4)
        for seed in range(5):
            ep = tr.sample_episode(ds, cfg, np.random.default_rng(seed))
            ids = ep.meta["image_ids"]
            assert len(set(ids)) == len(ids) == 8

    def test_fixed_seed_bit_identical(self, ds):
        cfg = small_cfg()
        a = tr.sample_episode(ds, cfg, np.random.default_rng(3))
        b = tr.sample_episode(ds, cfg, np.random.default_rng(3))
        for ia, ib in zip(a.support_images + a.query_images,
                          b.support_images + b.query_images):
            np.testing.assert_array_equal(ia, ib)
        for la, lb in zip(a.support_labels + a.query_labels,
                          b.support_labels + b.query_labels):
            for ca, cb in zip(la, lb):
                np.testing.assert_array_equal(ca, cb)

    def test_crop_flip_consistent_between_image_and_labels(self, ds):
        cfg = small_cfg()
        ep = tr.sample_episode(ds, cfg, np.random.default_rng(9))
        pairs = list(zip(ep.support_images, ep.support_labels)) \
            + list(zip(ep.query_images, ep.query_labels))
        for pi, (img, labs) in enumerate(pairs):
            image_id = ep.meta["image_ids"][pi]
            y0, x0 = ep.meta["crops"][pi]
            flip = ep.meta["flips"][pi]
            want_img = ds.image(image_id)[:, y0:y0 + 16, x0:x0 + 16]
            if flip:
                want_img = want_img[:, :, ::-1]
            np.testing.assert_array_equal(img, want_img)
            for ci, s in enumerate(ep.specs):
                want = ds.label(s.task, s.channel, image_id)[y0:y0 + 16,
                                                             x0:x0 + 16]
                if flip:
                    want = want[:, ::-1]
                np.testing.assert_array_equal(labs[ci], want)

    def test_flip_disallowed_disables_episode_flips(self):
        rng = np.random.default_rng(0)
        images = {f"i{k}": rng.random((3, 16, 16)).astype(np.float32)
                  for k in range(4)}
        spec = TaskChannelSpec("nrm", 1, "continuous", "l1",
                               flip_allowed=False)
        labels = {("nrm", 1): {k: rng.random((16, 16)).astype(np.float32)
                               for k in images}}
        ds = dk.Dataset(list(images), images, labels, [spec],
                        {"nrm": "train"})
        cfg = small_cfg(channels_per_episode=1, support_size=1, query_size=1)
        for seed in range(20):
            ep = tr.sample_episode(ds, cfg, np.random.default_rng(seed))
            assert ep.meta["flip_disabled"]
            assert not any(ep.meta["flips"])

    def test_flips_do_happen_when_allowed(self, ds):
        cfg = small_cfg()
        seen = set()
        for seed in range(20):
            ep = tr.sample_episode(ds, cfg, np.random.default_rng(seed))
            seen.update(ep.meta["flips"])
        assert seen == {True, False}

    def test_insufficient_resources(self, ds):
        with pytest.raises(DataError):
            tr.sample_episode(ds, small_cfg(channels_per_episode=50),
                              np.random.default_rng(0))
        with pytest.raises(DataError):
            tr.sample_episode(ds, small_cfg(support_size=8, query_size=8),
                              np.random.default_rng(0))
        with pytest.raises(DataError):
            tr.sample_episode(ds, small_cfg(crop=128),
                              np.random.default_rng(0))


class TestAugmentChannel:
    def test_mixup_lambda_one_keeps_augmented(self):
        rng = np.random.default_rng(0)
        labs = [rng.random((8, 8)).astype(np.float32) for _ in range(3)]
        aux = [rng.random((8, 8)).astype(np.float32) for _ in range(3)]
        out = tr.augment_channel(labs, 1.0, 0.0, 1, 0.5, 1.0, aux)
        for o, l in zip(out, labs):
            np.testing.assert_array_equal(o, l)

    def test_mixup_lambda_zero_takes_aux(self):
        rng = np.random.default_rng(1)
        labs = [rng.random((8, 8)).astype(np.float32)]
        aux = [rng.random((8, 8)).astype(np.float32)]
        out = tr.augment_channel(labs, 1.0, 0.0, 1, 0.5, 0.0, aux)
        np.testing.assert_array_equal(out[0], aux[0])

    def test_identity_parameters_leave_labels_unchanged(self):
        rng = np.random.default_rng(2)
        labs = [rng.random((8, 8)).astype(np.float32)]
        out = tr.augment_channel(labs, 1.0, 0.0, 1, 1.0, 0.7, None)
        np.testing.assert_array_equal(out[0], labs[0])

    def test_jitter_closed_form(self):
        lab = np.linspace(0, 1, 64, dtype=np.float32).reshape(8, 8)
        out = tr.augment_channel([lab], 0.5, 0.1, 1, 1.0, 1.0, None)
        np.testing.assert_allclose(out[0], np.clip(0.5 * lab + 0.1, 0, 1),
                                   atol=1e-7)

    def test_blur_matches_datakit(self):
        rng = np.random.default_rng(3)
        lab = rng.random((12, 12)).astype(np.float32)
        out = tr.augment_channel([lab], 1.0, 0.0, 3, 0.8, 1.0, None)
        want = np.clip(dk.gaussian_blur(lab, 3, 0.8), 0, 1)
        np.testing.assert_allclose(out[0], want, atol=1e-6)

    def test_clamped(self):
        lab = np.ones((4, 4), np.float32)
        out = tr.augment_channel([lab], 1.3, 0.2, 1, 1.0, 1.0, None)
        np.testing.assert_array_equal(out[0], 1.0)


class TestAugmentEpisode:
    def test_parameters_fixed_across_episode(self, ds):
        cfg = small_cfg(augment=True)
        rng = np.random.default_rng(4)
        ep = tr.sample_episode(ds, cfg, rng)
        aug = tr.augment_episode(ep, None, rng, cfg)
        assert len(aug.meta["augment"]) == len(ep.specs)
        # same jitter params recover each pair's label from the original
        for ci, trace in enumerate(aug.meta["augment"]):
            for orig, new in zip(ep.support_labels, aug.support_labels):
                want = tr.augment_channel([orig[ci]], trace["scale"],
                                          trace["shift"], *trace["blur"],
                                          trace["lam"], None)[0]
                np.testing.assert_array_equal(new[ci], want)

    def test_deterministic(self, ds):
        cfg = small_cfg(augment=True)
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            ep = tr.sample_episode(ds, cfg, rng)
            aug = tr.augment_episode(ep, tr.make_aux_sampler(ds, ep, rng),
                                     rng, cfg)
            outs.append(aug)
        for la, lb in zip(outs[0].support_labels, outs[1].support_labels):
            for ca, cb in zip(la, lb):
                np.testing.assert_array_equal(ca, cb)

    def test_outputs_in_range(self, ds):
        cfg = small_cfg(augment=True)
        rng = np.random.default_rng(6)
        for _ in range(3):
            ep = tr.sample_episode(ds, cfg, rng)
            aug = tr.augment_episode(ep, tr.make_aux_sampler(ds, ep, rng),
                                     rng, cfg)
            for per_pair in aug.support_labels + aug.query_labels:
                for lab in per_pair:
                    assert lab.min() >= 0.0 and lab.max() <= 1.0
                    assert lab.dtype == np.float32

    def test_aux_sampler_respects_crops_and_flips(self, ds):
        cfg = small_cfg()
        rng = np.random.default_rng(7)
        ep = tr.sample_episode(ds, cfg, rng)
        aux = tr.make_aux_sampler(ds, ep, np.random.default_rng(0))
        sup, qry = aux(0)
        assert len(sup) == ep.n_support and len(qry) == ep.n_query
        for lab in sup + qry:
            assert lab.shape == (16, 16)
            assert lab.min() >= 0.0 and lab.max() <= 1.0


class TestAdamState:
    def test_single_step_matches_oracle(self):
        import vtm.autodiff as ad
        ps = ad.ParamSet()
        rng = np.random.default_rng(0)
        p0 = rng.standard_normal(7).astype(np.float32)
        g0 = rng.standard_normal(7).astype(np.float32)
        ps.add("w", p0.copy())
        ps["w"].grad = g0.copy()
        opt = tr.AdamState()
        assert opt.apply(ps, lambda _n: 1e-3) == 1
        want, m, v = oracles.adam_step(p0, g0, np.zeros(7), np.zeros(7),
                                       t=1, lr=1e-3)
        np.testing.assert_allclose(ps["w"].data, want, atol=1e-6)

        g1 = rng.standard_normal(7).astype(np.float32)
        ps["w"].grad = g1.copy()
        opt.apply(ps, lambda _n: 1e-3)
        want, m, v = oracles.adam_step(want, g1, m, v, t=2, lr=1e-3)
        np.testing.assert_allclose(ps["w"].data, want, atol=1e-6)

    def test_lazy_skips_gradless(self):
        import vtm.autodiff as ad
        ps = ad.ParamSet()
        ps.add("a", np.ones(3, np.float32))
        ps.add("b", np.ones(3, np.float32))
        ps["a"].grad = np.ones(3, np.float32)
        opt = tr.AdamState()
        assert opt.apply(ps, lambda _n: 1e-3) == 1
        np.testing.assert_array_equal(ps["b"].data, 1.0)
        assert "b" not in opt.moments

    def test_only_filter(self):
        import vtm.autodiff as ad
        ps = ad.ParamSet()
        ps.add("a", np.ones(3, np.float32))
        ps.add("b", np.ones(3, np.float32))
        ps["a"].grad = np.ones(3, np.float32)
        ps["b"].grad = np.ones(3, np.float32)
        opt = tr.AdamState()
        assert opt.apply(ps, lambda _n: 1e-3, only={"a"}) == 1
        np.testing.assert_array_equal(ps["b"].data, 1.0)


class TestMetaTrainStep:
    def make(self, ds, **over):
        cfg = small_cfg(**over)
        model = toyconfigs.small_model(0, keys=())
        for spec in ds.channel_specs("train"):
            model.bank.register(spec.key, init="template")
        return model, cfg

    def test_loss_finite_and_params_move(self, ds):
        model, cfg = self.make(ds)
        model.bank.register("spare:1", init="template")
        spare = model.ps.checksum(model.bank.param_names("spare:1"))
        shared_before = model.ps.checksum(model.shared_param_names())
        rng = np.random.default_rng(0)
        opt = tr.AdamState()
        for step in range(2):
            eps = [tr.sample_episode(ds, cfg, rng)]
            value, lr = tr.meta_train_step(model, eps, opt, step, cfg, rng)
            assert np.isfinite(value) and value >= 0.0
        assert model.ps.checksum(model.shared_param_names()) != shared_before
        # never-sampled bias entry is bit-identical
        assert model.ps.checksum(model.bank.param_names("spare:1")) == spare

    def test_update_matches_adam_oracle(self, ds):
        model, cfg = self.make(ds)
        rng = np.random.default_rng(1)
        ep = tr.sample_episode(ds, cfg, rng)
        model.ps.zero_grad()
        loss, _ = model.episode_loss(ep, mode="eval")
        loss.backward()
        name = "match.lv1.q.w"
        p0 = model.ps[name].data.copy().ravel()
        g0 = model.ps[name].grad.copy().ravel()
        lr = tr.poly_lr(0, cfg.total_steps, cfg.lr_scratch, cfg.poly_power)
        want, _, _ = oracles.adam_step(p0, g0, np.zeros_like(p0),
                                       np.zeros_like(p0), t=1, lr=lr)
        tr.AdamState().apply(model.ps, lambda _n: lr)
        np.testing.assert_allclose(model.ps[name].data.ravel(), want,
                                   atol=1e-6)

    def test_query_permutation_invariance(self, ds):
        model, cfg = self.make(ds, query_size=3, support_size=2)
        ep = tr.sample_episode(ds, cfg, np.random.default_rng(2))
        loss_a, _ = model.episode_loss(ep, mode="eval")
        perm = [2, 0, 1]
        ep_b = type(ep)(ep.specs, ep.support_images, ep.support_labels,
                        [ep.query_images[i] for i in perm],
                        [ep.query_labels[i] for i in perm])
        loss_b, _ = model.episode_loss(ep_b, mode="eval")
        np.testing.assert_allclose(float(loss_a.data), float(loss_b.data),
                                   atol=1e-6)

    def test_empty_batch_rejected(self, ds):
        model, cfg = self.make(ds)
        with pytest.raises(UsageError):
            tr.meta_train_step(model, [], tr.AdamState(), 0, cfg,
                               np.random.default_rng(0))


class TestTrainLoop:
    def test_runs_logs_and_is_deterministic(self, ds):
        logs = []
        cfg = small_cfg(total_steps=3, augment=True, log_every=1)
        sums = []
        for _ in range(2):
            model = toyconfigs.small_model(0, keys=())
            history = tr.train(model, ds, cfg, log=logs.append)
            assert len(history) == 3
            sums.append(model.ps.checksum())
        assert sums[0] == sums[1]
        assert all(re.fullmatch(r"step \d+ loss \d+\.\d+ lr [\d.e+-]+", ln)
                   for ln in logs)
        assert len(logs) == 6

    def test_registers_training_channels(self, ds):
        model = toyconfigs.small_model(0, keys=())
        tr.train(model, ds, small_cfg(total_steps=1), log=None)
        for spec in ds.channel_specs("train"):
            assert spec.key in model.bank


class TestAdaptation:
    def ten_shot(self, ds, spec, n=6):
        imgs = np.stack([ds.image(i)[:, :16, :16] for i in ds.ids[:n]])
        labs = np.stack([ds.label(spec.task, spec.channel, i)[:16, :16]
                         for i in ds.ids[:n]])
        return imgs, labs

    def test_bias_isolation_checksums(self, ds):
        model = toyconfigs.small_model(0, keys=("t:1",))
        spec = ds.channel_specs("test")[0]
        imgs, labs = self.ten_shot(ds, spec)
        shared = model.ps.checksum(model.shared_param_names())
        other = model.ps.checksum(model.bank.param_names("t:1"))
        adp.adapt(model, imgs, labs, spec, adp.AdaptConfig(iterations=5))
        assert model.ps.checksum(model.shared_param_names()) == shared
        assert model.ps.checksum(model.bank.param_names("t:1")) == other
        entry_names = model.bank.param_names(spec.key)
        template = toyconfigs.small_model(0, keys=(spec.key,))
        assert model.ps.checksum(entry_names) \
            != template.ps.checksum(template.bank.param_names(spec.key))

    def test_zero_iterations_keeps_init(self, ds):
        model = toyconfigs.small_model(0, keys=())
        spec = ds.channel_specs("test")[0]
        imgs, labs = self.ten_shot(ds, spec)
        adp.adapt(model, imgs, labs, spec, adp.AdaptConfig(iterations=0))
        fresh = toyconfigs.small_model(0, keys=())
        fresh.bank.register(spec.key, init="template")
        for name in model.bank.param_names(spec.key):
            np.testing.assert_array_equal(model.ps[name].data,
                                          fresh.ps[name].data)

    def test_descent_on_fixed_seed(self, ds):
        model = toyconfigs.small_model(0, keys=())
        spec = ds.channel_specs("test")[0]
        imgs, labs = self.ten_shot(ds, spec)
        hist = adp.adapt(model, imgs, labs, spec,
                         adp.AdaptConfig(iterations=50, seed=3))
        assert hist[-1] <= hist[0]

    def test_deterministic(self, ds):
        spec = ds.channel_specs("test")[0]
        entries = []
        for _ in range(2):
            model = toyconfigs.small_model(0, keys=())
            imgs, labs = self.ten_shot(ds, spec)
            adp.adapt(model, imgs, labs, spec,
                      adp.AdaptConfig(iterations=5, seed=9))
            entries.append(model.ps.checksum(
                model.bank.param_names(spec.key)))
        assert entries[0] == entries[1]

    def test_early_stop_on_plateau(self, ds):
        model = toyconfigs.small_model(0, keys=())
        spec = ds.channel_specs("test")[0]
        imgs, labs = self.ten_shot(ds, spec, n=4)
        hist = adp.adapt(model, imgs, labs, spec,
                         adp.AdaptConfig(iterations=100, lr=1e-12,
                                         patience=3))
        assert len(hist) < 100

    def test_validation_errors(self, ds):
        model = toyconfigs.small_model(0, keys=())
        spec = ds.channel_specs("test")[0]
        imgs, labs = self.ten_shot(ds, spec, n=4)
        with pytest.raises(DataError):
            adp.adapt(model, imgs[:1], labs[:1], spec)
        with pytest.raises(UsageError):
            adp.adapt(model, imgs, labs, spec,
                      adp.AdaptConfig(sub_support=1, sub_query=1))
        with pytest.raises(DataError):
            adp.predict(model, imgs[0], imgs, labs,
                        TaskChannelSpec("ghost", 1, "continuous", "l1"))

    def test_predict_contract_and_invariances(self, ds):
        model = toyconfigs.small_model(0, keys=())
        spec = ds.channel_specs("test")[0]
        imgs, labs = self.ten_shot(ds, spec, n=4)
        adp.adapt(model, imgs, labs, spec, adp.AdaptConfig(iterations=3))
        out = adp.predict(model, imgs[0], imgs, labs, spec)
        assert out.shape == (16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0
        perm = [2, 0, 3, 1]
        out_p = adp.predict(model, imgs[0], imgs[perm], labs[perm], spec)
        np.testing.assert_allclose(out_p, out, atol=1e-6)
        dup = adp.predict(model, imgs[0], np.concatenate([imgs, imgs]),
                          np.concatenate([labs, labs]), spec)
        np.testing.assert_allclose(dup, out, atol=1e-5)
