import math

import numpy as np
import pytest
import torch

from reelnet.errors import ConfigError, SessionError, ShapeError, TrainingDiverged
from reelnet.services.data import frames_digest, synth_video
from reelnet.services.metrics import ssim_tensor
from reelnet.services.model import decode_session, embed_frames, forward, is_scored
from reelnet.services.subnet import topc_count
from reelnet.services.training import (
    MetricsLog,
    SessionRecord,
    TrainConfig,
    TrainedState,
    adam_step,
    backward,
    loss,
    loss_and_grad,
    lr_schedule,
    make_optimizer,
    session_mask,
    train_session,
)
from tests.conftest import make_tiny_config


def reference_ssim(x, y, size=4, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed SSIM by explicit loops over every valid window position."""
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-coords ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    window = np.outer(g, g)
    c1, c2 = k1 ** 2, k2 ** 2
    values = []
    for c in range(x.shape[0]):
        for i in range(x.shape[1] - size + 1):
            for j in range(x.shape[2] - size + 1):
                a = x[c, i:i + size, j:j + size]
                b = y[c, i:i + size, j:j + size]
                mu_a, mu_b = np.sum(window * a), np.sum(window * b)
                var_a = np.sum(window * a * a) - mu_a ** 2
                var_b = np.sum(window * b * b) - mu_b ** 2
                cov = np.sum(window * a * b) - mu_a * mu_b
                values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                              / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


class TestLoss:
    def test_identical_frames(self):
        x = torch.rand(2, 3, 6, 6, dtype=torch.float64)
        assert loss(x, x, 0.7).item() == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        pred = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
        true = torch.zeros_like(pred)
        assert loss(pred, true, 1.0).item() == pytest.approx(0.5)

    def test_mixed(self):
        pred = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        true = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        l1 = torch.mean(torch.abs(pred - true)).item()
        s = ssim_tensor(pred, true).mean().item()
        assert loss(pred, true, 0.7).item() == pytest.approx(0.7 * l1 + 0.3 * (1 - s), rel=1e-12)

    def test_ssim_matches_loop_reference(self):
        generator = torch.Generator().manual_seed(2)
        x = torch.rand(3, 6, 7, generator=generator, dtype=torch.float64)
        y = (x + 0.1 * torch.randn(3, 6, 7, generator=generator, dtype=torch.float64)).clamp(0, 1)
        got = ssim_tensor(x, y, window=4).item()
        assert got == pytest.approx(reference_ssim(x.numpy(), y.numpy()), abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), 0.5)

    def test_bad_alpha(self):
        with pytest.raises(ConfigError):
            loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), 1.5)

    def test_gradient_wrt_prediction(self):
        pred = torch.full((1, 3, 4, 4), 0.75, dtype=torch.float64)
        true = torch.zeros_like(pred)
        value, grad = loss_and_grad(pred, true, 1.0)
        assert value.item() == pytest.approx(0.75)
        assert torch.allclose(grad, torch.full_like(pred, 1.0 / pred.numel()))


class TestSchedule:
    def test_warmup_starts_at_zero(self):
        assert lr_schedule(0, 100, 10, 1e-3) == 0.0
        assert lr_schedule(5, 100, 10, 1e-3) == pytest.approx(5e-4)

    def test_peak_after_warmup(self):
        assert lr_schedule(10, 100, 10, 1e-3) == pytest.approx(1e-3)

    def test_cosine_midpoint_and_end(self):
        assert lr_schedule(55, 100, 10, 1e-3) == pytest.approx(5e-4)
        assert lr_schedule(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)

    def test_monotone_after_warmup(self):
        values = [lr_schedule(s, 50, 5, 1.0) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        theta = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        optimizer = make_optimizer([theta], TrainConfig(lr=0.1))
        adam_step([theta], [torch.ones(1, dtype=torch.float64)], optimizer, 0.1)
        assert theta.item() == pytest.approx(-0.1, rel=1e-6)

    def test_zero_gradient_leaves_parameter_unchanged(self):
        theta = torch.randn(10, dtype=torch.float64, requires_grad=True)
        before = theta.detach().clone()
        optimizer = make_optimizer([theta], TrainConfig())
        for _ in range(5):
            adam_step([theta], [torch.zeros(10, dtype=torch.float64)], optimizer, 1e-2)
        assert torch.equal(theta.detach(), before)

    def test_first_moment_decays(self):
        theta = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        config = TrainConfig(lr=0.1)
        optimizer = make_optimizer([theta], config)
        adam_step([theta], [torch.ones(1, dtype=torch.float64)], optimizer, 0.1)
        for _ in range(3):
            adam_step([theta], [torch.zeros(1, dtype=torch.float64)], optimizer, 0.1)
        exp_avg = optimizer.state[theta]['exp_avg'].item()
        assert exp_avg == pytest.approx((1 - config.adam_beta1) * config.adam_beta1 ** 3)

    def test_gradient_count_mismatch(self):
        theta = torch.zeros(2, requires_grad=True)
        optimizer = make_optimizer([theta], TrainConfig())
        with pytest.raises(ShapeError):
            adam_step([theta], [], optimizer, 0.1)


class TestBackward:
    def setup_batch(self, state, video):
        params, config = state.params, state.model_config
        params.add_head(0, config)
        embeddings = embed_frames(0, list(range(video.num_frames)), video.num_frames, config, torch.float64)
        return params, config, embeddings, video.frames.double()

    @pytest.mark.parametrize('seed', [3, 11, 19, 27, 35])
    def test_gradients_match_finite_differences(self, seed, tiny_train_config, synthetic_sessions):
        train_config = TrainConfig.from_dict({**tiny_train_config.to_dict(), 'seed': seed})
        state = TrainedState.create(make_tiny_config(), train_config, torch.float64)
        params, config, embeddings, targets = self.setup_batch(state, synthetic_sessions[0])
        grads = backward(params, embeddings, targets, 0, config, 0.5)
        fixed = session_mask(params, config, straight_through=False)
        step = 1e-5
        generator = torch.Generator().manual_seed(seed)

        def objective():
            with torch.no_grad():
                return loss(forward(embeddings, 0, params, fixed, config), targets, 0.5).item()

        def central_difference(store, name, index):
            original = store[name]
            values = []
            for sign in (1.0, -1.0):
                perturbed = original.detach().clone()
                perturbed.view(-1)[index] += sign * step
                store[name] = perturbed
                values.append(objective())
            store[name] = original
            return (values[0] - values[1]) / (2 * step)

        analytic, numeric = [], []
        for name in list(params.weights):
            selected = torch.nonzero(fixed[name].reshape(-1)).flatten()
            picks = selected[torch.randperm(len(selected), generator=generator)[:12]]
            for index in picks.tolist():
                analytic.append(grads.weights[name].reshape(-1)[index].item())
                numeric.append(central_difference(params.weights, name, index))
        for name in ('weight', 'bias'):
            for index in range(min(12, params.heads[0][name].numel())):
                analytic.append(grads.head[name].reshape(-1)[index].item())
                numeric.append(central_difference(params.heads[0], name, index))

        analytic, numeric = np.array(analytic), np.array(numeric)
        # coordinates with a vanishing gradient are compared on an absolute scale
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
        relative = np.abs(analytic - numeric) / scale
        assert len(relative) >= 40
        assert np.mean(relative < 1e-4) >= 0.99, f"worst relative error {relative.max():.3g}"

    def test_unselected_weights_get_no_gradient(self, tiny_state, synthetic_sessions):
        params, config, embeddings, targets = self.setup_batch(tiny_state, synthetic_sessions[0])
        grads = backward(params, embeddings, targets, 0, config, 0.7)
        fixed = session_mask(params, config, straight_through=False)
        for name, grad in grads.weights.items():
            assert torch.count_nonzero(grad[~fixed[name]]) == 0

    def test_frozen_weights_get_no_gradient(self, tiny_state, synthetic_sessions):
        params, config, embeddings, targets = self.setup_batch(tiny_state, synthetic_sessions[0])
        frozen = {name: torch.ones_like(w, dtype=torch.bool) for name, w in params.weights.items()}
        grads = backward(params, embeddings, targets, 0, config, 0.7, cumulative_prev=frozen)
        assert all(torch.count_nonzero(g) == 0 for g in grads.weights.values())
        assert any(torch.count_nonzero(g) > 0 for g in grads.head.values())

    def test_score_gradient_is_straight_through(self, tiny_state, synthetic_sessions):
        params, config, embeddings, targets = self.setup_batch(tiny_state, synthetic_sessions[0])
        grads = backward(params, embeddings, targets, 0, config, 0.7)
        fixed = session_mask(params, config, straight_through=False)
        for name, score_grad in grads.scores.items():
            selected = fixed[name]
            expected = grads.weights[name] * params.weights[name].detach()
            assert torch.allclose(score_grad[selected], expected[selected], atol=1e-14)

    def test_nan_targets_diverge(self, tiny_state, synthetic_sessions):
        params, config, embeddings, targets = self.setup_batch(tiny_state, synthetic_sessions[0])
        with pytest.raises(TrainingDiverged):
            backward(params, embeddings, torch.full_like(targets, math.nan), 0, config, 0.7)


class TestTrainSession:
    def test_record_and_masks(self, tiny_state, synthetic_sessions):
        record = train_session(synthetic_sessions[0], tiny_state, epochs=2)
        assert tiny_state.session_count == 1
        assert record.session == 0
        assert record.steps == 8
        assert record.num_frames == 4 and (record.height, record.width) == (4, 4)
        decoded = decode_session(tiny_state.params, tiny_state.masks, tiny_state.model_config, 0, 4)
        assert record.digest == frames_digest(decoded)
        for name, mask in tiny_state.masks.mask(0).items():
            expected = topc_count(mask.numel(), 0.5) if is_scored(name) else mask.numel()
            assert int(mask.sum()) == expected

    def test_earlier_sessions_are_bit_identical(self, tiny_state, synthetic_sessions):
        config = tiny_state.model_config
        train_session(synthetic_sessions[0], tiny_state, epochs=3)
        before = decode_session(tiny_state.params, tiny_state.masks, config, 0, 4)
        frozen = {n: w.clone() for n, w in tiny_state.params.weights.items()}
        support = tiny_state.masks.cumulative()

        train_session(synthetic_sessions[1], tiny_state, epochs=3)
        train_session(synthetic_sessions[2], tiny_state, epochs=3)
        after = decode_session(tiny_state.params, tiny_state.masks, config, 0, 4)
        assert torch.equal(before, after)
        assert frames_digest(after) == tiny_state.records[0].digest
        for name, weight in tiny_state.params.weights.items():
            assert torch.equal(weight[support[name]], frozen[name][support[name]])

    def test_full_capacity_matches_dense(self, tmp_path, tiny_train_config, synthetic_sessions):
        config = make_tiny_config(capacity_c=1.0)
        losses = []
        for dense in (False, True):
            state = TrainedState.create(config, tiny_train_config, torch.float64)
            log = MetricsLog(str(tmp_path / f'dense-{dense}.jsonl'))
            train_session(synthetic_sessions[0], state, metrics_log=log, dense=dense, epochs=2)
            losses.append([r['loss'] for r in log.read()])
        assert losses[0] == losses[1]

    def test_loss_goes_down(self, tmp_path, tiny_state, synthetic_sessions):
        log = MetricsLog(str(tmp_path / 'metrics.jsonl'))
        train_session(synthetic_sessions[0], tiny_state, metrics_log=log, epochs=10)
        records = log.read()
        assert len(records) == 40
        assert records[-1]['step'] == 40
        first = sum(r['loss'] for r in records[:4]) / 4
        last = sum(r['loss'] for r in records[-4:]) / 4
        assert last < first

    def test_dense_only_for_first_session(self, tiny_state, synthetic_sessions):
        config = tiny_state.model_config
        train_session(synthetic_sessions[0], tiny_state, dense=True, epochs=2)
        before = decode_session(tiny_state.params, tiny_state.masks, config, 0, 4)
        with pytest.raises(ConfigError):
            train_session(synthetic_sessions[1], tiny_state, dense=True, epochs=2)
        assert tiny_state.session_count == 1
        assert torch.equal(decode_session(tiny_state.params, tiny_state.masks, config, 0, 4), before)

    def test_dense_after_masked_session_rejected(self, tiny_state, synthetic_sessions):
        train_session(synthetic_sessions[0], tiny_state, epochs=1)
        with pytest.raises(ConfigError):
            train_session(synthetic_sessions[1], tiny_state, dense=True, epochs=1)

    def test_session_limit(self, tiny_train_config, synthetic_sessions):
        state = TrainedState.create(make_tiny_config(max_sessions=1), tiny_train_config, torch.float64)
        train_session(synthetic_sessions[0], state, epochs=1)
        with pytest.raises(SessionError):
            train_session(synthetic_sessions[1], state, epochs=1)

    def test_frame_size_mismatch(self, tiny_state):
        with pytest.raises(ShapeError):
            train_session(synthetic_video_8x8(), tiny_state, epochs=1)

    @pytest.mark.slow
    def test_overfits_single_video(self, desk_config):
        state = TrainedState.create(desk_config, TrainConfig())
        video = synth_video('moving_gradient', 4, 16, 16, seed=0)
        record = train_session(video, state)
        assert record.steps <= 3000
        assert record.psnr >= 30.0


def synthetic_video_8x8():
    return synth_video('bouncing_box', 2, 8, 8, seed=0)


class TestConfigAndRecords:
    @pytest.mark.parametrize('overrides', [
        {'alpha': -0.1}, {'lr': 0.0}, {'epochs': 0}, {'warmup_epochs': 10, 'epochs': 5}, {'batch_size': 0},
    ])
    def test_invalid_train_config(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides).validate()

    def test_unknown_train_keys(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({'learning_rate': 1.0})

    def test_record_with_infinite_psnr(self):
        record = SessionRecord(0, {'frames': 'a'}, 2, 4, 4, 'ab' * 32, math.inf, 1.0, 10)
        data = record.to_dict()
        assert data['psnr'] == 'inf'
        assert SessionRecord.from_dict(data) == record
