import random

import pytest
import torch

from drs_trainer import GradientLeak, ToyByteLM, check_gradients, sequence_masked_nll, shift_inputs


def tensors_for(sample, phase):
    tokens = torch.tensor([list(sample.data)], dtype=torch.long)
    mask = torch.tensor([sample.masks[phase]], dtype=torch.long)
    return tokens, mask


@pytest.fixture(scope="module")
def model(samples):
    torch.manual_seed(1)
    max_len = max(s.length for s in samples) + 1
    return ToyByteLM(max_len=max_len)


class TestGradientContract:
    def test_phase1_gradients_only_on_first_field(self, model, samples):
        sample = samples[0]
        tokens, mask = tensors_for(sample, 1)
        logits = model(shift_inputs(tokens))
        loss = sequence_masked_nll(logits, tokens, mask)
        (grad,) = torch.autograd.grad(loss, logits)
        per_position = grad[0].abs().sum(dim=-1)
        in_scope = mask[0].bool()
        assert bool((per_position[~in_scope] == 0).all())
        assert bool((per_position[in_scope] > 0).any())

    def test_zero_gradient_off_mask_all_phases(self, model, samples):
        rng = random.Random(3)
        for sample in samples[:4]:
            for phase in (1, 2, 3, 4):
                tokens, mask = tensors_for(sample, phase)
                report = check_gradients(model, tokens, mask, n_positions=2, rng=rng)
                assert report.max_rel_error <= 1e-4

    def test_corrupted_mask_bit_is_detected_as_leak(self, model, samples):
        sample = samples[0]
        tokens, true_mask = tensors_for(sample, 2)
        corrupted = true_mask.clone()
        flip = int(true_mask[0].argmin())  # first 0 bit becomes 1
        assert true_mask[0, flip] == 0
        corrupted[0, flip] = 1
        with pytest.raises(GradientLeak) as err:
            check_gradients(model, tokens, corrupted, expected_mask=true_mask, n_positions=0)
        assert err.value.position == (0, flip)

    def test_finite_difference_agreement(self, model, samples):
        rng = random.Random(11)
        for sample in samples[:3]:
            tokens, mask = tensors_for(sample, 4)
            report = check_gradients(model, tokens, mask, n_positions=10, rng=rng)
            assert report.checked_positions == 10
            assert report.ok, f"max rel error {report.max_rel_error}"

    def test_phase_additivity_at_fixed_parameters(self, model, samples):
        for sample in samples[:5]:
            tokens = torch.tensor([list(sample.data)], dtype=torch.long)
            logits = model(shift_inputs(tokens)).detach()
            for k in (1, 2, 3):
                low = torch.tensor([sample.masks[k]], dtype=torch.long)
                high = torch.tensor([sample.masks[k + 1]], dtype=torch.long)
                increment = high - low
                delta = (
                    sequence_masked_nll(logits, tokens, high)
                    - sequence_masked_nll(logits, tokens, low)
                ).item()
                direct = sequence_masked_nll(logits, tokens, increment).item()
                assert abs(delta - direct) < 1e-6
