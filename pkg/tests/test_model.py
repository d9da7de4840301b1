import json
import math

import numpy as np
import pytest

from lap_lab import autodiff as ad
from lap_lab.autodiff import ContractViolation, RngStream, Tensor, precision
from lap_lab.model import (EOS, BOS, DecodeConfig, Example, HiddenState, InputError, ModelConfig, ParameterSet,
                           batch_losses, forward, forward_from, forward_hidden, generate, generate_batch, init_params,
                           lm_loss, load_checkpoint, make_batch, parameter_shapes, perturbed_lm_loss,
                           save_checkpoint, sequence_embedding, sequence_embeddings)

CFG = ModelConfig(n_layers=3, d_model=16, n_heads=2, vocab_size=32, max_seq=24)
EX = Example([1, 5, 6, 7, 3], [9, 10, 2])


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 0, scale=0.2)


def test_parameter_names_and_shapes_depend_only_on_config():
    a, b = init_params(CFG, 0), init_params(CFG, 1)
    assert list(a) == list(b) == list(parameter_shapes(CFG))
    for name, dims in parameter_shapes(CFG).items():
        assert a[name].dims == dims
    assert a["tok_emb"].dims == (32, 16) and a["head"].dims == (16, 32)


@pytest.mark.parametrize("kwargs", [dict(d_model=15), dict(n_layers=0), dict(injection_layer=4),
                                    dict(embedding_layer=0)])
def test_config_validation(kwargs):
    base = dict(n_layers=3, d_model=16, n_heads=2)
    with pytest.raises(ContractViolation):
        ModelConfig(**{**base, **kwargs})


def test_default_layers_are_mid_depth():
    assert ModelConfig().default_injection_layer == 2
    assert ModelConfig().default_embedding_layer == 2
    assert ModelConfig(n_layers=1, d_model=8, n_heads=2).default_embedding_layer == 1


def test_layer_zero_is_token_plus_position_embedding(params):
    tokens = [1, 4, 8, 3]
    h = forward_hidden(params, tokens, 0)
    expected = params["tok_emb"].data[tokens] + params["pos_emb"].data[:4]
    np.testing.assert_array_equal(h.activations.data, expected)
    assert h.layer == 0


@pytest.mark.parametrize("layer", range(CFG.n_layers + 1))
def test_split_compose_identity(params, layer):
    tokens = [1, 4, 8, 3, 12, 9]
    full = forward(params, tokens).data
    split = forward_from(params, forward_hidden(params, tokens, layer), layer).data
    assert full.tobytes() == split.tobytes()


def test_forward_is_pure(params):
    tokens = [1, 4, 8, 3]
    assert forward(params, tokens).data.tobytes() == forward(params, tokens).data.tobytes()


def test_forward_from_layer_mismatch(params):
    h = forward_hidden(params, [1, 2, 3], 1)
    with pytest.raises(ContractViolation):
        forward_from(params, h, 2)


def test_out_of_vocab_token_is_input_error(params):
    with pytest.raises(InputError):
        forward_hidden(params, [1, 32], 1)
    with pytest.raises(InputError):
        forward(params, [1] * 25)


def test_example_validation():
    with pytest.raises(InputError):
        Example([1, 2], []).validate(CFG)
    with pytest.raises(InputError):
        Example([], [2]).validate(CFG)
    with pytest.raises(InputError):
        Example([1] * 20, [2] * 5).validate(CFG)


def test_perturbed_hidden_with_zero_delta_gives_identical_logits(params):
    tokens = [1, 4, 8, 3]
    h = forward_hidden(params, tokens, 1)
    bumped = HiddenState(1, h.activations + Tensor(np.zeros((4, 16), dtype=np.float32)))
    assert forward_from(params, bumped, 1).data.tobytes() == forward(params, tokens).data.tobytes()
    moved = HiddenState(1, h.activations + Tensor(RngStream(0).normal((4, 16), 0.5)))
    assert not np.allclose(forward_from(params, moved, 1).data, forward(params, tokens).data)


def test_causality(params):
    with precision(64):
        p = params.astype(np.float64)
        a = forward(p, [1, 4, 8, 3, 12, 9]).data
        b = forward(p, [1, 4, 8, 20, 21, 22]).data
    np.testing.assert_allclose(a[:3], b[:3], rtol=0, atol=1e-12)
    assert not np.allclose(a[3:], b[3:])


def test_uniform_head_gives_log_vocab(params):
    zero_head = params.with_arrays({"head": np.zeros((16, 32), dtype=np.float32)})
    assert math.isclose(lm_loss(zero_head, EX).item(), math.log(32), rel_tol=1e-6)


def test_loss_only_counts_response_tokens(params):
    base = lm_loss(params, EX).item()
    other_prompt_same_len = lm_loss(params, Example([1, 5, 6, 7, 3], [9, 10, 2])).item()
    assert base == other_prompt_same_len
    batch = make_batch([EX], CFG)
    # targets counted: positions whose next token is a response token
    assert batch.loss_mask[0].tolist() == [False] * 4 + [True] * 3
    assert batch.perturb_mask[0].tolist() == [True] * 5 + [False] * 2
    assert make_batch([EX], CFG, "full").perturb_mask[0].all()


def test_loss_is_bitwise_reproducible():
    a = lm_loss(init_params(CFG, 9), EX).data.tobytes()
    b = lm_loss(init_params(CFG, 9), EX).data.tobytes()
    assert a == b


def test_batched_losses_match_single_examples(params):
    other = Example([1, 8, 3], [4, 5, 6, 2])
    with precision(64):
        p = params.astype(np.float64)
        losses = batch_losses(p, make_batch([EX, other], CFG)).data
        singles = [lm_loss(p, EX).item(), lm_loss(p, other).item()]
    np.testing.assert_allclose(losses, singles, rtol=1e-12)


def test_zero_delta_is_bitwise_equal_to_plain_loss(params):
    delta = Tensor(np.zeros((5, 16), dtype=np.float32))
    for layer in range(CFG.n_layers + 1):
        assert perturbed_lm_loss(params, EX, delta, layer).data.tobytes() == lm_loss(params, EX).data.tobytes()


def test_tiny_delta_changes_loss_continuously(params):
    with precision(64):
        p = params.astype(np.float64)
        d = RngStream(2).normal((5, 16))
        d *= 1e-6 / np.linalg.norm(d)
        change = abs(perturbed_lm_loss(p, EX, Tensor(d), 1).item() - lm_loss(p, EX).item())
    assert change <= 1e-3


def test_nonzero_delta_changes_loss(params):
    d = Tensor(RngStream(2).normal((5, 16), 1.0))
    assert perturbed_lm_loss(params, EX, d, 1).item() != lm_loss(params, EX).item()


def test_delta_shape_mismatch(params):
    with pytest.raises(ContractViolation):
        perturbed_lm_loss(params, EX, Tensor(np.zeros((4, 16))), 1)
    full = Tensor(np.zeros((7, 16)))
    assert perturbed_lm_loss(params, EX, full, 1, positions="full").item() == lm_loss(params, EX).item()


def test_perturbation_on_response_positions_requires_full_mask(params):
    # the prompt mask only ever touches prompt rows
    d = np.zeros((7, 16), dtype=np.float32)
    d[6] = 5.0
    batch = make_batch([EX], CFG)
    moved = batch_losses(params, batch, Tensor(d[None]), 1).item()
    assert moved == lm_loss(params, EX).item()


def test_theta_gradient_of_loss_passes_check():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=16, max_seq=12)
    with precision(64):
        p = init_params(cfg, 3, scale=0.3)
    ex = Example([1, 5, 6, 3], [7, 2])
    for name in ("head", "h0.mlp.w_in", "h0.attn.wq", "tok_emb"):
        def f(w, name=name):
            return lm_loss(ParameterSet(cfg, {**p, name: w}), ex)

        report = ad.grad_check(f, p[name], h=3e-5)
        assert report.passed, (name, report.max_rel_err)


def test_sequence_embedding_is_last_hidden_row(params):
    tokens = [1, 4, 8, 3]
    e = sequence_embedding(params, tokens, 2)
    np.testing.assert_array_equal(e, forward_hidden(params, tokens, 2).activations.data[-1])
    np.testing.assert_array_equal(sequence_embedding(params, tokens), sequence_embedding(params, tokens, 1))
    assert np.linalg.norm(e - sequence_embedding(params, tokens, 2)) == 0
    assert not np.array_equal(e, sequence_embedding(params, [1, 4, 9, 3], 2))
    with pytest.raises(ContractViolation):
        sequence_embedding(params, tokens, 0)


def test_batched_embeddings_match_single(params):
    prompts = [[1, 4, 8, 3], [1, 5, 3], [1, 6, 7, 9, 10, 3]]
    batched = sequence_embeddings(params, prompts, 2)
    for row, p in zip(batched, prompts):
        np.testing.assert_allclose(row, sequence_embedding(params, p, 2), rtol=1e-5, atol=1e-6)


def _chain_model():
    """Embeddings one-hot, head maps token t to t+1, everything else zero: greedy counts upward."""
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, vocab_size=16, max_seq=16)
    p = init_params(cfg, 0)
    arrays = {k: np.zeros_like(v.data) for k, v in p.items()}
    arrays["tok_emb"] = np.eye(16, dtype=np.float32) * 4
    arrays["h0.ln1.g"] = arrays["h0.ln2.g"] = np.ones(16, dtype=np.float32)
    arrays["ln_f.g"] = np.ones(16, dtype=np.float32)
    arrays["head"] = np.roll(np.eye(16, dtype=np.float32), 1, axis=1) * 10
    return p.with_arrays(arrays)


def test_greedy_follows_dominant_path():
    p = _chain_model()
    assert generate(p, [BOS, 5], DecodeConfig(mode="greedy", max_new=4)) == [6, 7, 8, 9]
    # the chain reaches EOS (id 2) from id 1 and stops there
    assert generate(p, [BOS], DecodeConfig(mode="greedy", max_new=4)) == []


def test_greedy_matches_manual_argmax(params):
    prompt = [1, 4, 8, 3]
    out = generate(params, prompt, DecodeConfig(mode="greedy", max_new=5), eos=-1)
    seq = list(prompt)
    for _ in range(5):
        seq.append(int(np.argmax(forward(params, seq).data[-1])))
    assert out == seq[len(prompt):]


def test_max_new_one_gives_one_token(params):
    assert len(generate(params, [1, 4, 3], DecodeConfig(mode="greedy", max_new=1), eos=-1)) == 1
    assert len(generate(params, [1, 4, 3], DecodeConfig(max_new=1), RngStream(0), eos=-1)) == 1


def test_nucleus_defaults_and_determinism(params):
    d = DecodeConfig()
    assert (d.mode, d.p, d.temperature) == ("nucleus", 0.9, 1.0)
    a = generate_batch(params, [[1, 4, 3], [1, 5, 6, 3]], d, RngStream(1), eos=-1)
    b = generate_batch(params, [[1, 4, 3], [1, 5, 6, 3]], d, RngStream(1), eos=-1)
    assert a == b


def test_tiny_nucleus_equals_greedy(params):
    prompt = [1, 4, 8, 3]
    g = generate(params, prompt, DecodeConfig(mode="greedy", max_new=6), eos=-1)
    n = generate(params, prompt, DecodeConfig(mode="nucleus", p=1e-9, max_new=6), RngStream(4), eos=-1)
    assert g == n


def test_decode_config_validation():
    with pytest.raises(ContractViolation):
        DecodeConfig(max_new=0)
    with pytest.raises(ContractViolation):
        DecodeConfig(mode="beam")


def test_checkpoint_round_trip_is_lossless(tmp_path, params):
    save_checkpoint(tmp_path / "ck", params, {"seed": 3})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert loaded.config == params.config and loaded.checksum() == params.checksum()
    assert forward(loaded, [1, 4, 8]).data.tobytes() == forward(params, [1, 4, 8]).data.tobytes()
    assert manifest["seed"] == 3 and manifest["format_version"] == 1
    offsets = [t["offset"] for t in manifest["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0
    blob = (tmp_path / "ck" / "weights.bin").read_bytes()
    first = manifest["tensors"][0]
    raw = np.frombuffer(blob, dtype="<f4", count=int(np.prod(first["dims"])))
    np.testing.assert_array_equal(raw.reshape(first["dims"]), params[first["name"]].data)


def test_checkpoint_rejects_mismatched_tensors(tmp_path, params):
    save_checkpoint(tmp_path / "ck", params)
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["model_config"]["d_model"] = 8
    manifest["model_config"]["n_heads"] = 2
    path.write_text(json.dumps(manifest))
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "ck")


def test_eos_constant():
    assert EOS == 2 and BOS == 1
