"""Module for running reproducible experiments into output directories"""

import ast
import dataclasses
import logging
import os
import pprint
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

from s4ecg.config import save_config, to_dict
from s4ecg.errors import ConfigError
from s4ecg.util import content_hash

logger = logging.getLogger(__name__)

EXPERIMENT_FILE = "experiment.txt"
INPUT_HASH_FILE = "inputs.sha256"
OUTPUT_HASH_FILE = "outputs.sha256"


@dataclass(frozen=True)
class ExperimentSpec:
    """What a command was asked to do.

    Attributes:
        command: CLI command name
        config_paths: configuration files the command read
        seed: master seed
        output_dir: directory receiving every artifact of the run
        run_index: index of the run within a multi-run experiment
        arguments: remaining command-line arguments
    """

    command: str
    config_paths: Tuple[str, ...] = ()
    seed: int = 0
    output_dir: str = "."
    run_index: int = 0
    arguments: Tuple[Tuple[str, Any], ...] = ()

    def describe(self) -> str:
        """The experiment as a Python literal, without the output directory"""
        values = dataclasses.asdict(self)
        values.pop("output_dir")
        return pprint.pformat(values, sort_dicts=True)


def load_experiment(path: str) -> ExperimentSpec:
    """Reads an experiment file written by `ExperimentRunner.prepare`"""
    with open(path, "r", encoding="UTF-8") as f:
        try:
            values = ast.literal_eval(f.read())
            return ExperimentSpec(**values)
        except (ValueError, SyntaxError, TypeError) as e:
            raise ConfigError("Could not read the experiment.") from e


class ExperimentRunner:
    """Records the inputs, configurations and outputs of a run in its output directory"""

    def __init__(self, spec: ExperimentSpec) -> None:
        self._spec = spec

    @property
    def spec(self) -> ExperimentSpec:
        return self._spec

    @property
    def output_dir(self) -> str:
        return self._spec.output_dir

    def path(self, *parts: str) -> str:
        return os.path.join(self._spec.output_dir, *parts)

    def prepare(self, configs: Optional[Mapping[str, Any]] = None, inputs: Sequence[str] = ()) -> str:
        """Creates the output directory and writes the experiment, its configurations and the input hash.

        Args:
            configs: configurations by name, each written to `<name>.txt`
            inputs: files or directories the run reads

        Returns:
            the content hash over inputs, configurations and the experiment itself
        """
        os.makedirs(self._spec.output_dir, exist_ok=True)
        with open(self.path(EXPERIMENT_FILE), "w", encoding="UTF-8") as f:
            f.write(pprint.pformat(dataclasses.asdict(self._spec), sort_dicts=True))
            f.write("\n")
        serialized = [self._spec.describe()]
        for name, config in sorted((configs or {}).items()):
            save_config(self.path(f"{name}.txt"), config)
            serialized.append(pprint.pformat(to_dict(config), sort_dicts=True))
        digest = content_hash(list(inputs) + list(self._spec.config_paths), extra=serialized)
        self._write_hash(INPUT_HASH_FILE, digest)
        logger.info("%s run %d in %s, inputs %s", self._spec.command, self._spec.run_index, self.output_dir, digest)
        return digest

    def finish(self, outputs: Sequence[str]) -> str:
        """Writes and returns the content hash over the produced artifacts"""
        digest = content_hash(outputs)
        self._write_hash(OUTPUT_HASH_FILE, digest)
        logger.info("%s finished, outputs %s", self._spec.command, digest)
        return digest

    def _write_hash(self, name: str, digest: str) -> None:
        with open(self.path(name), "w", encoding="UTF-8") as f:
            f.write(digest + "\n")


def arguments_of(values: Dict[str, Any], exclude: Sequence[str] = ()) -> Tuple[Tuple[str, Any], ...]:
    """Sorted literal-safe (name, value) pairs of parsed command-line arguments"""
    pairs = []
    for name, value in sorted(values.items()):
        if name in exclude or callable(value):
            continue
        if isinstance(value, list):
            value = tuple(value)
        pairs.append((name, value))
    return tuple(pairs)
