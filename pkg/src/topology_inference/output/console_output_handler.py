import numbers

import pandas as pd
from rich.box import SIMPLE_HEAD
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from src.topology_inference.output.abstract_output_handler import AbstractOutputHandler

_STYLES = {
    'info': "[blue]{}[/blue]",
    'warning': "[bold yellow]Warning:[/bold yellow] {}",
    'error': "[bold red]Error:[/bold red] {}",
    'success': "[bold green]{}[/bold green]",
    'dim': "[dim]{}[/dim]",
}


class ConsoleOutputHandler(AbstractOutputHandler):
    """
    Reports experiment progress on the terminal using rich.
    """
    def __init__(self, max_rows: int = 12, console: Console = None):
        self.console = console or Console()
        self.max_rows = max_rows

    def print_message(self, message: str, style: str = None):
        self.console.print(_STYLES.get(style, "{}").format(message))

    def display_dataframe(self, df: pd.DataFrame, title: str = None):
        """
        Numeric columns are right-aligned and floats shown with 6 significant
        digits; rows beyond max_rows are dropped and noted in the caption.
        """
        if df.empty:
            self.show_warning(f"'{title or 'table'}' has no rows.")
            return

        shown = df.head(self.max_rows)
        caption = f"first {self.max_rows} of {len(df)} rows" if len(df) > self.max_rows else None
        table = Table(title=title, caption=caption, box=SIMPLE_HEAD, header_style="bold magenta",
                      title_style="bold magenta", title_justify="left")
        for column in shown.columns:
            numeric = pd.api.types.is_numeric_dtype(shown[column])
            table.add_column(escape(str(column)), justify="right" if numeric else "left")
        for row in shown.itertuples(index=False):
            table.add_row(*[escape(_format_cell(value)) for value in row])
        self.console.print(table)

    def display_plot(self, image_path: str, title: str = None):
        label = f"{title}: " if title else ""
        self.print_message(f"{escape(label)}[cyan]{escape(image_path)}[/cyan]", style='success')

    def stage_started(self, name: str, description: str):
        self.print_message(escape(f"[{name}] {description}"), style='dim')

    def stage_finished(self, name: str, seconds: float, failed: bool = False):
        if failed:
            self.console.print(f"[red]{escape(f'[{name}] failed after {seconds:.2f} s')}[/red]")
        else:
            self.print_message(escape(f"[{name}] done in {seconds:.2f} s"), style='dim')

    def show_error(self, message: str):
        self.print_message(escape(message), style='error')

    def show_warning(self, message: str):
        self.print_message(escape(message), style='warning')


def _format_cell(value) -> str:
    if isinstance(value, numbers.Real) and not isinstance(value, (bool, numbers.Integral)):
        return f"{float(value):.6g}"
    return str(value)
