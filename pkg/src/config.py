from dotenv import load_dotenv
import os

# Load environment variables from .env file
load_dotenv()


def _floats(text):
    return tuple(float(part) for part in text.split(",") if part.strip())


class Configuration:

    SWAP_DIR = os.getenv("LLMS_SWAP_DIR", "./swap")
    SOCKET_PATH = os.getenv("LLMS_SOCKET", "./llms.sock")
    LOG_LEVEL = os.getenv("LLMS_LOG_LEVEL", "INFO")

    CHUNK_TOKENS = int(os.getenv("LLMS_CHUNK_TOKENS", 16))
    RATIO_GLOBAL = float(os.getenv("LLMS_RATIO_GLOBAL", 0.5))
    RATIOS = _floats(os.getenv("LLMS_RATIOS", "1,0.5,0.25"))
    MEM_BUDGET_MB = float(os.getenv("LLMS_MEM_BUDGET_MB", 64))
    MAX_CONTEXTS = int(os.getenv("LLMS_MAX_CONTEXTS", 8))
    WINDOW_TOKENS = int(os.getenv("LLMS_WINDOW_TOKENS", 256))
    MAX_NEW_TOKENS = int(os.getenv("LLMS_MAX_NEW_TOKENS", 16))

    MODEL_LAYERS = int(os.getenv("LLMS_MODEL_LAYERS", 2))
    MODEL_HEADS = int(os.getenv("LLMS_MODEL_HEADS", 4))
    MODEL_HEAD_DIM = int(os.getenv("LLMS_MODEL_HEAD_DIM", 16))
    MODEL_MAX_SEQ = int(os.getenv("LLMS_MODEL_MAX_SEQ", 512))
    MODEL_SEED = int(os.getenv("LLMS_MODEL_SEED", 0))

    def model_config(self):
        from src.model.tinylm import TinyLmConfig

        return TinyLmConfig(
            layers=self.MODEL_LAYERS,
            heads=self.MODEL_HEADS,
            head_dim=self.MODEL_HEAD_DIM,
            max_seq=self.MODEL_MAX_SEQ,
            seed=self.MODEL_SEED,
        )

    def store_config(self, **overrides):
        from src.memory.chunk import StoreConfig

        values = dict(
            swap_dir=self.SWAP_DIR,
            budget_bytes=int(self.MEM_BUDGET_MB * 1024 * 1024),
            chunk_tokens=self.CHUNK_TOKENS,
            ratios=self.RATIOS,
            ratio_global=self.RATIO_GLOBAL,
            window_tokens=self.WINDOW_TOKENS,
        )
        values.update(overrides)
        return StoreConfig(**values)


global_config = Configuration()
