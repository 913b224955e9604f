import inspect
import time
from functools import wraps
from typing import Any, Callable, Dict, List, Optional

from src.topology_inference.errors import StageError
from src.topology_inference.output.abstract_output_handler import AbstractOutputHandler

_registered_stages: List[Dict[str, Any]] = []


def _reporter(args) -> Optional[AbstractOutputHandler]:
    handler = getattr(args[0], "output_handler", None) if args else None
    return handler if isinstance(handler, AbstractOutputHandler) else None


def stage(name: str, description: str = "") -> Callable:
    """
    Marks a pipeline step. The step is recorded in the stage registry and any
    exception escaping it is re-raised as a StageError carrying the label.
    Methods of an object with an `output_handler` report their start and
    duration through it.
    """
    def decorator(func: Callable) -> Callable:
        summary = description
        if not summary and func.__doc__:
            summary = func.__doc__.strip().splitlines()[0]
        summary = summary or f"Run the {func.__name__} step."

        @wraps(func)
        def wrapper(*args, **kwargs):
            handler = _reporter(args)
            if handler is not None:
                handler.stage_started(name, summary)
            started = time.perf_counter()
            failed = True
            try:
                result = func(*args, **kwargs)
                failed = False
                return result
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e
            finally:
                if handler is not None:
                    handler.stage_finished(name, time.perf_counter() - started, failed)

        parameters = [p for p in inspect.signature(func).parameters if p != "self"]
        _registered_stages.append({
            "name": name,
            "function": func.__qualname__,
            "description": summary,
            "parameters": parameters,
        })
        wrapper.stage_name = name
        return wrapper
    return decorator


def get_registered_stages() -> List[Dict[str, Any]]:
    return list(_registered_stages)
