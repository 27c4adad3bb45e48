"""Run a decoder LLM over text and capture its attention-state trace.

Keys and values come straight from the model's KV cache (so keys are
post-rotation, exactly what the cache stores); a flag switches key
capture to the raw projection outputs before position encoding. Per-state
attention aggregates are column sums of the causal attention maps,
averaged across the query heads that share each KV head.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .writer import write_trace

__all__ = ["ExportError", "ExportSpec", "export_trace", "TINY_MODEL_PREFIX"]

TINY_MODEL_PREFIX = "tiny-random-llama"


class ExportError(Exception):
    """Model loading, tokenization, or capture failure."""


@dataclass
class ExportSpec:
    model: str
    text: str
    out: str
    max_seq_len: int = 1024
    first_layer: int = 0
    pre_rope: bool = False
    extra_meta: dict = field(default_factory=dict)


def _build_tiny_model(spec_str: str):
    """Seeded random-init decoder with grouped-query attention.

    `tiny-random-llama[:seed]` needs no downloads: weights come from the
    seed and text is tokenized at the byte level (ids 0-255).
    """
    from transformers import LlamaConfig, LlamaForCausalLM

    seed = 0
    if ":" in spec_str:
        _, _, tail = spec_str.partition(":")
        try:
            seed = int(tail)
        except ValueError as e:
            raise ExportError(f"bad seed in model spec {spec_str!r}") from e
    config = LlamaConfig(
        vocab_size=260,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=6,
        num_attention_heads=4,
        num_key_value_heads=2,
        max_position_embeddings=2048,
        attn_implementation="eager",
    )
    torch.manual_seed(seed)
    model = LlamaForCausalLM(config).eval()
    return model, None


def _load_model(name: str):
    if name.split(":")[0] == TINY_MODEL_PREFIX:
        return _build_tiny_model(name)
    try:
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(name)
        model = AutoModelForCausalLM.from_pretrained(
            name, attn_implementation="eager"
        ).eval()
        return model, tokenizer
    except Exception as e:
        raise ExportError(f"cannot load model {name!r}: {e}") from e


def _tokenize(text: str, tokenizer, max_seq_len: int) -> torch.Tensor:
    if tokenizer is None:
        ids = list(text.encode("utf-8"))
    else:
        try:
            ids = tokenizer(text, add_special_tokens=False)["input_ids"]
        except Exception as e:
            raise ExportError(f"tokenization failed: {e}") from e
    if len(ids) < 2:
        raise ExportError(f"input tokenizes to {len(ids)} tokens; need at least 2")
    if len(ids) > max_seq_len:
        warnings.warn(
            f"input has {len(ids)} tokens; truncating to {max_seq_len}",
            RuntimeWarning,
        )
        ids = ids[:max_seq_len]
    return torch.tensor([ids], dtype=torch.long)


def _cache_tensors(past_key_values):
    """Per-layer (keys, values) as (kv_heads, T, head_dim) arrays."""
    layers = getattr(past_key_values, "layers", None)
    if layers is not None:
        pairs = [(layer.keys, layer.values) for layer in layers]
    else:  # older cache API
        pairs = list(zip(past_key_values.key_cache, past_key_values.value_cache))
    return [
        (k[0].detach().to(torch.float32).numpy(), v[0].detach().to(torch.float32).numpy())
        for k, v in pairs
    ]


def _grouped_column_sums(attn: torch.Tensor, kv_heads: int) -> np.ndarray:
    """Aggregate one layer's maps to per-state scores, one row per KV head.

    Query heads sharing a KV head are averaged elementwise first, then
    each state's received attention is summed down the columns.
    """
    maps = attn[0].detach().to(torch.float64).numpy()  # (q_heads, T, T)
    q_heads = maps.shape[0]
    if q_heads % kv_heads != 0:
        raise ExportError(
            f"query heads ({q_heads}) not divisible by KV heads ({kv_heads})"
        )
    group = q_heads // kv_heads
    out = np.empty((kv_heads, maps.shape[1]))
    for h in range(kv_heads):
        mean_map = maps[h * group : (h + 1) * group].mean(axis=0)
        out[h] = mean_map.sum(axis=0)
    return out


def export_trace(spec: ExportSpec) -> dict:
    """Export one trace; returns a summary of what was written."""
    model, tokenizer = _load_model(spec.model)
    ids = _tokenize(spec.text, tokenizer, spec.max_seq_len)
    T = ids.shape[1]

    pre_rope_keys: list[torch.Tensor] = []
    hooks = []
    if spec.pre_rope:
        config = model.config
        kv_heads = getattr(config, "num_key_value_heads", config.num_attention_heads)
        head_dim = getattr(config, "head_dim", None) or (
            config.hidden_size // config.num_attention_heads
        )

        def capture(_module, _inputs, output):
            # (1, T, kv_heads * head_dim) -> (kv_heads, T, head_dim)
            pre_rope_keys.append(
                output[0].view(-1, kv_heads, head_dim).transpose(0, 1).detach()
            )

        for layer in model.model.layers:
            hooks.append(layer.self_attn.k_proj.register_forward_hook(capture))

    try:
        with torch.no_grad():
            out = model(ids, use_cache=True, output_attentions=True)
    except Exception as e:
        raise ExportError(f"forward pass failed: {e}") from e
    finally:
        for h in hooks:
            h.remove()

    cache = _cache_tensors(out.past_key_values)
    num_layers = len(cache)
    kv_heads = cache[0][0].shape[0]
    head_dim = cache[0][0].shape[2]
    if not 0 <= spec.first_layer < num_layers:
        raise ExportError(
            f"first_layer {spec.first_layer} out of range for {num_layers} layers"
        )
    if head_dim % 2 != 0:
        raise ExportError(f"model head_dim {head_dim} is odd; format needs even")

    selected = range(spec.first_layer, num_layers)
    if spec.pre_rope:
        keys = np.stack(
            [pre_rope_keys[i].to(torch.float32).numpy() for i in selected]
        )
    else:
        keys = np.stack([cache[i][0] for i in selected])
    values = np.stack([cache[i][1] for i in selected])
    attn_agg = np.stack(
        [_grouped_column_sums(out.attentions[i], kv_heads) for i in selected]
    )

    meta = {
        "model": spec.model,
        "tokens": T,
        "first_layer": spec.first_layer,
        "pre_rope": spec.pre_rope,
        **spec.extra_meta,
    }
    write_trace(
        spec.out,
        keys=keys,
        values=values,
        attn_agg=attn_agg,
        rope_applied=not spec.pre_rope,
        source_meta=json.dumps(meta, sort_keys=True),
    )
    return {
        "layers": len(selected),
        "kv_heads": kv_heads,
        "seq_len": T,
        "head_dim": head_dim,
        "out": spec.out,
    }
