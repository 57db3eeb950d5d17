"""Shared fixtures: lazily trained desk-scale checkpoints, reused across tests."""

import time
from dataclasses import replace

import pytest

from coopfuse.pipeline import Pipeline, PipelineConfig, evaluate
from coopfuse.training import train
from coopfuse.world import ChannelConfig

TOGGLES = {
    "full": (True, True, True),
    "baseline": (False, False, False),
    "stsync": (True, False, False),
    "wtden": (False, True, False),
    "adpsel": (False, False, True),
}

ACCEPTANCE_SEEDS = (1, 2, 3, 4, 5)


def desk_config(label: str, seed: int) -> PipelineConfig:
    st, wt, ad = TOGGLES[label]
    cfg = PipelineConfig(stsync=st, wtden=wt, adpsel=ad, seed=seed)
    cfg.training = replace(cfg.training, seed=seed)
    return cfg.validate()


class ModelBank:
    """Trains desk-scale checkpoints on demand and caches them for the session."""

    def __init__(self):
        self._models: dict[tuple[str, int], Pipeline] = {}
        self._evals: dict[tuple, object] = {}
        self.train_seconds: dict[tuple[str, int], float] = {}

    def get(self, label: str, seed: int) -> Pipeline:
        key = (label, seed)
        if key not in self._models:
            t0 = time.time()
            result = train(desk_config(label, seed))
            self.train_seconds[key] = time.time() - t0
            self._models[key] = result.pipeline
            self._models[key]._loss_curve = result.loss_curve
        return self._models[key]

    def metrics(self, label: str, seed: int, channel: ChannelConfig | None = None,
                wtden_override: bool | None = None):
        ch_key = None if channel is None else (channel.max_latency_ticks,
                                               channel.drop_p, channel.loc_sigma,
                                               channel.head_sigma)
        key = (label, seed, ch_key, wtden_override)
        if key not in self._evals:
            pipe = self.get(label, seed)
            if wtden_override is not None and wtden_override != pipe.cfg.wtden:
                cfg = replace(pipe.cfg, wtden=wtden_override)
                view = Pipeline(cfg)
                for name, p in view.parameters().items():
                    p.data = pipe.parameters()[name].data.copy()
                pipe = view
            self._evals[key] = evaluate(pipe, channel=channel, config_id=label)
        return self._evals[key]


@pytest.fixture(scope="session")
def model_bank():
    return ModelBank()
