import json
import sqlite3
from datetime import datetime
from typing import Any, Dict, List, Optional

from run_config import run_db_from_env


def _db_path(db_path: Optional[str]) -> str:
    return db_path or run_db_from_env()


def init_db(db_path: Optional[str] = None):
    """Create the run ledger table if it does not exist yet."""
    with sqlite3.connect(_db_path(db_path)) as conn:
        cursor = conn.cursor()
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                arguments TEXT NOT NULL,
                run_timestamp TEXT NOT NULL,
                status TEXT NOT NULL, -- 'OK' or 'NOK'
                details TEXT
            )
        """)
        conn.commit()


def log_run(command: str, arguments: Dict[str, Any], status: str, details: str,
            db_path: Optional[str] = None) -> int:
    """Record the outcome of one CLI invocation."""
    init_db(db_path)
    ts = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    with sqlite3.connect(_db_path(db_path)) as conn:
        cursor = conn.cursor()
        cursor.execute(
            """
            INSERT INTO runs (command, arguments, run_timestamp, status, details)
            VALUES (?, ?, ?, ?, ?)
            """,
            (command, json.dumps(arguments, sort_keys=True, default=str), ts, status, details)
        )
        conn.commit()
        return cursor.lastrowid


def get_run_history(command: Optional[str] = None, limit: int = 20,
                    db_path: Optional[str] = None) -> List[Dict[str, Any]]:
    """Most recent runs first, optionally for one command only."""
    init_db(db_path)
    with sqlite3.connect(_db_path(db_path)) as conn:
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()
        if command:
            cursor.execute(
                "SELECT * FROM runs WHERE command = ? ORDER BY id DESC LIMIT ?", (command, limit)
            )
        else:
            cursor.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,))
        return [dict(row) for row in cursor.fetchall()]
