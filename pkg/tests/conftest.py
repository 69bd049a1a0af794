import numpy as np

from risa.geomfeat import STRUCT_DIM
from risa.mesh import subdivided_cube
from risa.model import ModelConfig, RisaNet, ShapeBatch


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_parts=3, n_edges=18, d_z=4, d_s=3, d_h=4, enc_widths=(3, 4), global_widths=(6, 5),
                geo_hidden=3, struct_hidden=3)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, labels, seed=0, missing=()) -> ShapeBatch:
    """Random features for len(labels) shapes; ``missing`` lists (row, part) pairs to blank out."""
    rng = np.random.default_rng(seed)
    B = len(labels)
    feats = rng.normal(size=(B, cfg.n_parts, cfg.n_edges, cfg.in_channels))
    struct = rng.normal(size=(B, cfg.n_parts, STRUCT_DIM))
    mask = np.ones((B, cfg.n_parts), dtype=bool)
    for b, p in missing:
        mask[b, p] = False
        feats[b, p] = 0.0
        struct[b, p] = 0.0
    return ShapeBatch(feats, struct, mask, list(labels), [f"s{i}" for i in range(B)])


def tiny_model(seed=0, **kw) -> RisaNet:
    return RisaNet(tiny_config(**kw), subdivided_cube(0).adjacency, seed=seed)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
