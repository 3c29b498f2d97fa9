import logging
from pathlib import Path

from metrics.evaluation import EvalReport

logger = logging.getLogger(__name__)

COLUMNS = ("Index", "Model", "F1", "IoU", "MIoU", "MIoU_branch")
WIDTHS = (5, 22, 7, 7, 7, 11)


def _row(cells: tuple[str, ...]) -> str:
    return " ".join(cell.rjust(width) for cell, width in zip(cells, WIDTHS))


def format_table(report: EvalReport, model_name: str = "DaSNet-V2 (LW-net)") -> str:
    rule = "-" * len(_row(COLUMNS))
    values = (
        "1",
        model_name[: WIDTHS[1]],
        f"{report.f1:.3f}",
        f"{report.mean_box_iou:.3f}",
        f"{report.instance_miou:.3f}",
        f"{report.semantic_miou_branch:.3f}",
    )
    return "\n".join([rule, _row(COLUMNS), rule, _row(values), rule]) + "\n"


def write_report(report: EvalReport, out_dir: Path | str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "eval_report.json"
    table_path = out_dir / "eval_table.txt"
    json_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    table_path.write_text(format_table(report), encoding="utf-8")
    logger.info(f"Wrote evaluation report to {json_path} and {table_path}")
    return json_path, table_path
