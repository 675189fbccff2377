import pytest
import torch

from caidd.errors import ConfigError, ContractError
from caidd.experts import Experts
from caidd.sampler import SampleRequest, sample, sample_batch, sample_stacked
from caidd.trainer import fit, load_dataset

from conftest import tiny_config

STEPS = 25


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config("steps=10")
    data = load_dataset(cfg)
    return fit(data, cfg), data


def _req(data, i, j, seed=0, steps=STEPS, **ov):
    return SampleRequest(data[i], data[j], seed=seed, steps=steps, overrides=ov)


def test_same_request_bitwise_identical(trained):
    ck, data = trained
    a = sample(_req(data, 0, 1), ck)
    b = sample(_req(data, 0, 1), ck)
    assert torch.equal(a, b)
    assert a.shape == (3, 16, 16) and a.min() >= -1 and a.max() <= 1


def test_full_length_sampling_deterministic(trained):
    ck, data = trained
    a = sample(_req(data, 0, 1, steps=None), ck)
    assert torch.equal(a, sample(_req(data, 0, 1, steps=1000), ck))


def test_distinct_seeds_distinct_outputs(trained):
    ck, data = trained
    outs = [sample(_req(data, 0, 1, seed=s), ck) for s in range(8)]
    for i in range(8):
        for j in range(i + 1, 8):
            assert not torch.equal(outs[i], outs[j])


def test_severed_conditioning_ignores_source(trained):
    ck, data = trained
    a = sample(_req(data, 0, 2, disable_cross_attention=True), ck)
    b = sample(_req(data, 1, 2, disable_cross_attention=True), ck)
    assert torch.equal(a, b)
    c = sample(_req(data, 0, 2), ck)
    d = sample(_req(data, 1, 2), ck)
    assert not torch.equal(c, d)


def test_step_and_size_contracts(trained):
    ck, data = trained
    with pytest.raises(ContractError):
        sample(_req(data, 0, 1, steps=1001), ck)
    with pytest.raises(ContractError):
        sample(_req(data, 0, 1, steps=0), ck)
    with pytest.raises(ConfigError):
        sample(SampleRequest(torch.zeros(3, 32, 32), data[1]), ck)
    with pytest.raises(ConfigError):
        sample(_req(data, 0, 1, disable_everything=True), ck)


def test_bundle_built_once(trained, monkeypatch):
    ck, data = trained
    calls = []
    real = Experts.build_condition

    def counting(self, x):
        calls.append(x.shape[0])
        return real(self, x)

    monkeypatch.setattr(Experts, "build_condition", counting)
    sample(_req(data, 0, 1), ck)
    assert calls == [1]


def test_batch_matches_single_calls(trained):
    ck, data = trained
    reqs = [_req(data, i, (i + 1) % 4, seed=10 + i) for i in range(4)]
    singles = [sample(r, ck) for r in reqs]
    batch = sample_batch(reqs, ck)
    assert all(torch.equal(a, b) for a, b in zip(singles, batch))
    assert torch.equal(sample_batch(reqs[:1], ck)[0], singles[0])
    perm = [2, 0, 3, 1]
    permuted = sample_batch([reqs[i] for i in perm], ck)
    assert all(torch.equal(permuted[k], singles[i]) for k, i in enumerate(perm))


def test_batch_error_names_request(trained):
    ck, data = trained
    reqs = [_req(data, 0, 1), SampleRequest(torch.zeros(3, 8, 8), data[1], steps=STEPS)]
    with pytest.raises(ConfigError, match="request 1"):
        sample_batch(reqs, ck)


def test_stacked_path_close_to_single(trained):
    ck, data = trained
    reqs = [_req(data, i, (i + 1) % 4, seed=i) for i in range(3)]
    stacked = sample_stacked(reqs, ck)
    for r, s in zip(reqs, stacked):
        assert float((sample(r, ck) - s).abs().max()) < 0.1
    with pytest.raises(ContractError):
        sample_stacked([reqs[0], _req(data, 0, 1, steps=5)], ck)
