import json

import pytest
import torch

from drs_trainer import (
    AdapterConfig,
    MissingPhaseArtifacts,
    ToyByteLM,
    TrainConfig,
    full_supervision_nll,
    staged_train,
)


class TestStagedTrain:
    def test_short_run_reduces_loss_and_logs_phases(self, plan, samples, tmp_path):
        subset = samples[:10]
        log_path = tmp_path / "metrics.jsonl"
        result = staged_train(
            plan, subset, config=TrainConfig(base_epochs=2.0, batch_size=4, seed=0), log_path=log_path
        )
        assert result.final_full_nll < result.initial_full_nll
        assert result.phase_order == [1, 2, 3, 4]
        rows = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert rows and set(rows[0]) == {"phase", "step", "masked_nll"}
        seen_phases = [row["phase"] for row in rows]
        assert seen_phases == sorted(seen_phases)  # plan order
        assert all(row["masked_nll"] >= 0 for row in rows)

    def test_reversed_plan_runs_and_logs_reversed_order(self, plan, samples, tmp_path):
        reversed_plan = list(reversed(plan))
        result = staged_train(
            reversed_plan,
            samples[:8],
            config=TrainConfig(base_epochs=1.0, batch_size=4, seed=0),
            log_path=tmp_path / "rev.jsonl",
        )
        assert result.phase_order == [4, 3, 2, 1]
        phases_seen = [row.phase for row in result.logs]
        boundaries = [phases_seen[0]]
        for phase in phases_seen:
            if phase != boundaries[-1]:
                boundaries.append(phase)
        assert boundaries == [4, 3, 2, 1]

    def test_zero_base_epochs_changes_nothing(self, plan, samples):
        subset = samples[:6]
        torch.manual_seed(5)
        model = ToyByteLM(max_len=max(s.length for s in subset) + 1)
        before = [p.detach().clone() for p in model.parameters()]
        nll_before = full_supervision_nll(model, subset)
        result = staged_train(plan, subset, model=model, config=TrainConfig(base_epochs=0.0))
        assert result.logs == []
        assert result.initial_full_nll == result.final_full_nll == pytest.approx(nll_before)
        for original, current in zip(before, model.parameters()):
            assert torch.equal(original, current)

    def test_missing_phase_artifacts(self, plan, samples):
        subset = [samples[0]]
        crippled = type(subset[0])(subset[0].sample_id, subset[0].data, {1: subset[0].masks[1]})
        with pytest.raises(MissingPhaseArtifacts):
            staged_train(plan, [crippled], config=TrainConfig(base_epochs=1.0))

    def test_same_seed_same_result(self, plan, samples):
        subset = samples[:6]
        config = TrainConfig(base_epochs=1.0, batch_size=4, seed=7)
        first = staged_train(plan, subset, config=config)
        second = staged_train(plan, subset, config=config)
        assert first.final_full_nll == pytest.approx(second.final_full_nll, abs=1e-12)


class TestArtifacts:
    def test_fixture_corpus_shape(self, samples):
        assert len(samples) == 50
        for sample in samples:
            assert set(sample.masks) == {1, 2, 3, 4}
            assert all(len(mask) == sample.length for mask in sample.masks.values())
            masks = [sample.masks[k] for k in (1, 2, 3, 4)]
            for low, high in zip(masks, masks[1:]):
                assert all(a <= b for a, b in zip(low, high))
            assert all(bit == 1 for bit in sample.masks[4])

    def test_plan_fixture_matches_published_schedule(self, plan):
        assert [p.phase_id for p in plan] == [1, 2, 3, 4]
        assert [p.learning_rate for p in plan] == [5e-5, 4e-5, 3e-5, 3e-6]
        assert [p.epoch_multiplier for p in plan] == [0.5, 1.0, 1.0, 1.0]
        assert [p.epochs for p in plan] == [4.0, 8.0, 8.0, 8.0]  # baked at base 8
        assert [p.resolved_epochs(2.0) for p in plan] == [1.0, 2.0, 2.0, 2.0]


class TestAdapterConfig:
    def test_defaults_and_plan_wiring(self, plan, tmp_path):
        config = AdapterConfig.from_plan(plan)
        assert config.lora_rank == 16 and config.lora_alpha == 16
        assert config.lora_dropout == 0.2
        assert config.target_modules == ("q_proj", "k_proj", "v_proj", "o_proj")
        assert config.gradient_accumulation == 4
        assert config.weight_decay == 0.05
        assert config.max_grad_norm == 1.0
        assert config.max_seq_len == 8192
        assert [p["learning_rate"] for p in config.phases] == [5e-5, 4e-5, 3e-5, 3e-6]
        out = tmp_path / "adapter.json"
        config.emit(out)
        assert json.loads(out.read_text())["lora_rank"] == 16
