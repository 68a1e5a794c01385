"""Synthetic tasks, training loops and experiment drivers."""
from .config import ConfigError, load_config, parse_config
from .experiments import AblationResult, GridResult, ablation_sweep, blocksize_grid
from .tasks import GENERATORS, SyntheticTask, as_arrays, generate_corpus, read_corpus, respond, write_corpus
from .training import (CSV_HEADER, OBJECTIVES, PROTOCOLS, Protocol, RunMetrics, TrainConfig, TrainState,
                       build_batch, checkpoint_grid, default_model_config, exact_match, run_protocol, train,
                       train_step)
