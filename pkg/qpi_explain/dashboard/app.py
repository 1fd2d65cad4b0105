"""
qpi-explain Dashboard - Main Textual Application

Flow: Runs -> Summary tables (table1 / table2) -> Calibration, OOD and mislabel details
"""
import asyncio
import json
import os
from pathlib import Path
from typing import Dict, List, Optional

from textual import work
from textual.app import App, ComposeResult
from textual.binding import Binding
from textual.containers import ScrollableContainer, Vertical
from textual.message import Message
from textual.widgets import Footer, Header, Label, Rule, Static

from ..config import RUNS_DIR
from ..runs import LOCK_NAME, get_run_registry
from ..tensor_io import read_csv
from .watcher import RunsWatcher


# ============================================================================
# Report rendering (plain text, markup-free)
# ============================================================================

def _cell(value: str) -> str:
    try:
        f = float(value)
    except ValueError:
        return value
    return value if f.is_integer() and "." not in value else f"{f:.3f}"


def format_csv(path: Path, max_rows: int = 20, columns: Optional[List[str]] = None) -> str:
    """Aligned text table of a CSV file; floats rounded to 3 decimals."""
    if not path.exists():
        return f"(no {path.name} yet)"
    rows = read_csv(path)
    if not rows:
        return f"({path.name} is empty)"
    header = columns or list(rows[0].keys())
    body = [[_cell(r.get(c, "")) for c in header] for r in rows[:max_rows]]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(header)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    if len(rows) > max_rows:
        lines.append(f"... {len(rows) - max_rows} more rows")
    return "\n".join(lines)


def calibration_lines(run_path: Path) -> List[str]:
    lines = []
    for report in sorted((run_path / "calibration").glob("*.json")):
        try:
            with open(report, encoding="utf-8") as f:
                data = json.load(f)
        except (json.JSONDecodeError, OSError):
            continue
        lines.append(f"{report.stem}: ECE {data['ece_before']:.3f} -> {data['ece']:.3f}  "
                     f"MCE {data['mce_before']:.3f} -> {data['mce']:.3f}  T={data['temperature']:.2f}")
    return lines or ["No calibration reports"]


def ood_lines(run_path: Path) -> List[str]:
    path = run_path / "ood" / "kruskal.json"
    if not path.exists():
        return ["No OOD statistics"]
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    lines = [f"Kruskal-Wallis H={data['H']:.2f} p={data['p']:.3g} (df {data['df']})", ""]
    lines.append(format_csv(run_path / "ood" / "confidence.csv"))
    return lines


def mislabel_lines(run_path: Path) -> List[str]:
    path = run_path / "mislabels" / "summary.json"
    if not path.exists():
        return ["No mislabel screening"]
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    return [f"{len(data['suspects'])} suspects at >= {data['threshold']}",
            f"planted flips found: {data['recall']:.0%}"]


def run_summary(run_path: Path) -> Dict[str, str]:
    """Text for every dashboard panel of one run directory."""
    run_path = Path(run_path)
    lock = run_path / LOCK_NAME
    return {
        "table1": format_csv(run_path / "reports" / "table1.csv",
                             columns=["model", "mode", "precision", "recall", "f1", "accuracy", "runs"]),
        "table2": format_csv(run_path / "reports" / "table2.csv",
                             columns=["model", "source", "ece_before", "ece", "mce_before", "mce", "runs"]),
        "calibration": "\n".join(calibration_lines(run_path)),
        "ood": "\n".join(ood_lines(run_path)),
        "mislabels": "\n".join(mislabel_lines(run_path)),
        "lock": lock.read_text(encoding="utf-8") if lock.exists() else "",
    }


# ============================================================================
# Clickable Cards
# ============================================================================

class RunCard(Static):
    """Clickable run card"""
    can_focus = True

    class Selected(Message):
        """Message when a run is selected"""
        def __init__(self, run_id: str, path: str) -> None:
            self.run_id = run_id
            self.path = path
            super().__init__()

    def __init__(self, run_id: str, path: str, status: str, last_command: Optional[str], **kwargs) -> None:
        self.run_id = run_id
        self.path = path
        icon = {'done': '🟢', 'running': '🟡', 'failed': '🔴'}.get(status, '⚫')
        super().__init__(f"{icon} [b]{run_id}[/b]\n   {last_command or '-'} ({status})", **kwargs)

    def on_click(self) -> None:
        self.post_message(self.Selected(self.run_id, self.path))

    def key_enter(self) -> None:
        self.post_message(self.Selected(self.run_id, self.path))


class RunsWidget(ScrollableContainer):
    """Runs from the registry, newest first"""
    can_focus = True

    def compose(self) -> ComposeResult:
        yield Label("🧪 Runs (click to select)", classes="widget-title")
        yield ScrollableContainer(id="runs-list")


class ReportWidget(ScrollableContainer):
    """One titled text panel"""
    can_focus = True

    def __init__(self, title: str, key: str, **kwargs) -> None:
        super().__init__(id=f"panel-{key}", **kwargs)
        self.title_text = title
        self.key = key

    def compose(self) -> ComposeResult:
        yield Label(self.title_text, classes="widget-title")
        yield Static("Select a run", id=f"{self.key}-content")


class QpiDashboard(App):
    """qpi-explain Dashboard - runs, summary tables, calibration and OOD results"""

    TITLE = "qpi-explain Dashboard"
    SUB_TITLE = "Interpretable QPI classification runs"

    CSS = '''
    Screen {
        layout: grid;
        grid-size: 3;
        grid-columns: 1fr 2fr 1fr;
    }

    #left-panel, #right-panel {
        height: 100%;
        border: solid $primary;
        padding: 1;
    }

    #center-panel {
        height: 100%;
        border: solid $secondary;
        padding: 1;
    }

    .widget-title {
        text-style: bold;
        color: $accent;
        margin-bottom: 1;
    }

    RunCard {
        padding: 0 1;
        margin-bottom: 1;
    }

    RunCard:focus {
        background: $boost;
    }
    '''

    BINDINGS = [
        Binding("q", "quit", "Quit"),
        Binding("r", "refresh", "Refresh"),
        Binding("tab", "focus_next", "Next"),
        Binding("shift+tab", "focus_previous", "Prev"),
        Binding("1", "focus_runs", "Runs"),
        Binding("j", "scroll_down", "Down"),
        Binding("k", "scroll_up", "Up"),
    ]

    PANELS = {
        "center": [("📊 Classification summary", "table1"), ("🎯 Calibration summary", "table2")],
        "right": [("🌡 Calibration reports", "calibration"), ("🚫 OOD confidence", "ood"),
                  ("🏷 Mislabel screening", "mislabels")],
    }

    def __init__(self, runs_dir: Optional[str] = None):
        super().__init__()
        self.runs_dir = runs_dir or RUNS_DIR
        self.watcher = None
        self.selected_run: Optional[str] = None

    def compose(self) -> ComposeResult:
        yield Header()
        with Vertical(id="left-panel"):
            yield RunsWidget()
        with Vertical(id="center-panel"):
            for i, (title, key) in enumerate(self.PANELS["center"]):
                if i:
                    yield Rule()
                yield ReportWidget(title, key)
        with Vertical(id="right-panel"):
            for i, (title, key) in enumerate(self.PANELS["right"]):
                if i:
                    yield Rule()
                yield ReportWidget(title, key)
        yield Footer()

    def on_mount(self) -> None:
        self.refresh_data()
        self.start_watcher()

    def start_watcher(self) -> None:
        """Start polling watcher for live updates"""
        async def on_change(changed_files):
            self.refresh_data()

        self.watcher = RunsWatcher(self.runs_dir, on_change=on_change, poll_interval=2.0)
        asyncio.create_task(self.watcher.start())

    def on_unmount(self) -> None:
        if self.watcher:
            self.watcher.stop()

    @work(exclusive=True)
    async def refresh_data(self) -> None:
        await self.load_runs()
        if self.selected_run:
            await self.load_reports(self.selected_run)

    async def load_runs(self) -> None:
        container = self.query_one("#runs-list", ScrollableContainer)
        await container.remove_children()
        runs = get_run_registry(self.runs_dir).all()
        if not runs:
            await container.mount(Static("No runs yet - try 'qpi-explain repro'"))
            return
        if self.selected_run is None:
            self.selected_run = runs[0].path
        for info in runs:
            await container.mount(RunCard(info.run_id, info.path, info.status, info.last_command))

    async def load_reports(self, run_path: str) -> None:
        try:
            summary = run_summary(Path(run_path))
        except Exception as e:
            summary = {key: f"Error: {e}" for _, key in self.PANELS["center"] + self.PANELS["right"]}
        for _, key in self.PANELS["center"] + self.PANELS["right"]:
            self.query_one(f"#{key}-content", Static).update(summary[key])
        lock = summary.get("lock")
        self.sub_title = f"{Path(run_path).name}" + (" (locked)" if lock else "")

    def on_run_card_selected(self, event: RunCard.Selected) -> None:
        self.selected_run = event.path
        asyncio.create_task(self.load_reports(event.path))

    def action_refresh(self) -> None:
        self.refresh_data()

    def action_focus_runs(self) -> None:
        self.query_one(RunsWidget).focus()

    def action_scroll_down(self) -> None:
        focused = self.focused
        if focused and hasattr(focused, 'scroll_down'):
            focused.scroll_down()

    def action_scroll_up(self) -> None:
        focused = self.focused
        if focused and hasattr(focused, 'scroll_up'):
            focused.scroll_up()


def main(runs_dir: Optional[str] = None):
    """Run the dashboard"""
    app = QpiDashboard(runs_dir=runs_dir or os.environ.get("QPI_RUNS_DIR"))
    app.run()
