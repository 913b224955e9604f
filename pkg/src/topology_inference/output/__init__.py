from src.topology_inference.output.abstract_output_handler import AbstractOutputHandler
from src.topology_inference.output.console_output_handler import ConsoleOutputHandler
from src.topology_inference.output.recording_output_handler import RecordingOutputHandler, StageTiming

__all__ = ["AbstractOutputHandler", "ConsoleOutputHandler", "RecordingOutputHandler", "StageTiming"]
