import logging

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def format_frame(df: pd.DataFrame, rows: int | None = None, floatfmt: str = ".6g") -> str:
    """Render a DataFrame as a plain-text table (tabulate through DataFrame.to_markdown)."""
    view = df if rows is None else df.head(rows)
    return view.to_markdown(index=False, tablefmt="simple", floatfmt=floatfmt)


def log_report_frame(df: pd.DataFrame, name: str, max_rows: int = 20, level: int = logging.INFO) -> None:
    """
    Log the shape and a table preview of a report DataFrame.

    Parameters
    ----------
    df : pd.DataFrame
        The report to log.
    name : str
        Title for the log lines.
    max_rows : int
        Number of rows to show in the preview.
    level : int
        Logging level of the table preview.
    """
    if df is None:
        logger.warning(f"{name}: None (no report provided)")
        return
    if not isinstance(df, pd.DataFrame):
        logger.warning(f"{name}: not a DataFrame (type={type(df)})")
        return

    logger.info(f"{name}: shape={df.shape}, columns=[{', '.join(map(str, df.columns))}]")
    if df.empty:
        return
    num_cols = df.select_dtypes(include=[np.number])
    if not num_cols.empty:
        logger.debug(f"Numeric summary for {name}:\n{num_cols.describe().T[['mean', 'min', 'max']]}")
    logger.log(level, f"{name} (first {min(max_rows, len(df))} rows):\n{format_frame(df, max_rows)}")
