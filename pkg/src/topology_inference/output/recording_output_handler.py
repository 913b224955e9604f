from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import pandas as pd

from src.topology_inference.output.abstract_output_handler import AbstractOutputHandler


@dataclass
class StageTiming:
    name: str
    seconds: Optional[float] = None
    failed: bool = False


@dataclass
class RecordingOutputHandler(AbstractOutputHandler):
    """
    Keeps every report in memory instead of printing it.
    Used when experiments are driven from Python code or from tests.
    """
    messages: List[Tuple[Optional[str], str]] = field(default_factory=list)
    tables: List[Tuple[Optional[str], pd.DataFrame]] = field(default_factory=list)
    plots: List[str] = field(default_factory=list)
    stages: List[StageTiming] = field(default_factory=list)

    def print_message(self, message: str, style: str = None):
        self.messages.append((style, message))

    def display_dataframe(self, df: pd.DataFrame, title: str = None):
        self.tables.append((title, df.copy()))

    def display_plot(self, image_path: str, title: str = None):
        self.plots.append(image_path)

    def stage_started(self, name: str, description: str):
        self.stages.append(StageTiming(name))

    def stage_finished(self, name: str, seconds: float, failed: bool = False):
        # Stages may finish out of order (theory runs in a worker thread).
        for timing in reversed(self.stages):
            if timing.name == name and timing.seconds is None:
                timing.seconds, timing.failed = seconds, failed
                return

    def by_style(self, style: str) -> List[str]:
        return [message for s, message in self.messages if s == style]

    def stage_names(self) -> List[str]:
        return [timing.name for timing in self.stages]
