from abc import ABC, abstractmethod

import pandas as pd


class AbstractOutputHandler(ABC):
    """
    Where an experiment reports to: free-form messages, summary tables,
    rendered figures and the start/finish of every pipeline stage.
    """

    @abstractmethod
    def print_message(self, message: str, style: str = None):
        """'style' is one of 'info', 'warning', 'error', 'success', 'dim' or None."""

    @abstractmethod
    def display_dataframe(self, df: pd.DataFrame, title: str = None):
        pass

    @abstractmethod
    def display_plot(self, image_path: str, title: str = None):
        pass

    @abstractmethod
    def stage_started(self, name: str, description: str):
        pass

    @abstractmethod
    def stage_finished(self, name: str, seconds: float, failed: bool = False):
        """Called once per started stage, also when it raised."""

    def show_error(self, message: str):
        self.print_message(message, style='error')

    def show_warning(self, message: str):
        self.print_message(message, style='warning')

    def show_success(self, message: str):
        self.print_message(message, style='success')
