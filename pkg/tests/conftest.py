import numpy as np
import pytest

from src.memory.chunk import StoreConfig
from src.memory.chunk_store import ChunkStore
from src.model.tinylm import TinyLmConfig, forward_full


@pytest.fixture
def model_config():
    return TinyLmConfig(layers=2, heads=4, head_dim=16, max_seq=128, seed=0)


@pytest.fixture
def store_config(tmp_path):
    return StoreConfig(swap_dir=str(tmp_path / "swap"), budget_bytes=1 << 20, chunk_tokens=16, window_tokens=96)


@pytest.fixture
def store(model_config, store_config):
    return ChunkStore(model_config, store_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def prefill():
    """Feed tokens to an empty context the way the service does, without decoding."""

    def run(store, ctx, token_ids, include_partial=True):
        result = forward_full(store.model_config, token_ids, ctx.end_position)
        ctx.density.update(result.attention)
        ctx.token_ids.extend(token_ids)
        store.commit(ctx, result.kv, include_partial=include_partial)
        return result

    return run
