# data_storage.py
"""Result files and the optional SQLite results database"""
import json
import re
import sqlite3
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, List, Tuple

import pandas as pd

from logger import perf_logger

logger = perf_logger.get_logger('data_storage', 'storage')

FLOAT_FORMAT = '%.17g'


def header_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}\n"


def write_table(df: pd.DataFrame, path, config_hash: str, seed: int) -> Path:
    """CSV with a leading `# config_hash=... seed=...` line; floats printed repr-exact"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        f.write(header_line(config_hash, seed))
        df.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"💾 {path} ({len(df)} rows)")
    return path


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, comment='#', float_precision='round_trip')


def read_header(path) -> dict:
    """The key=value pairs of the header comment line"""
    with open(path, encoding='utf-8') as f:
        first = f.readline()
    return dict(re.findall(r'(\w+)=(\S+)', first)) if first.startswith('#') else {}


def write_json(obj: Any, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + '\n', encoding='utf-8')
    logger.info(f"💾 {path}")
    return path


class ResultStorage:
    """Run tables in SQLite, one table per saved run plus a runs_meta index"""

    def __init__(self, db_path: str = "plume_results.db"):
        self.db_path = db_path
        self.logger = logger
        self.logger.debug(f"✅ Initializing ResultStorage: {db_path}")
        start_time = time.time()
        self._init_database()
        self._verify_integrity()
        elapsed = time.time() - start_time
        if elapsed > 1.0:
            self.logger.warning(f"Database initialization took {elapsed:.3f} sec")

    def _create_meta(self, cursor):
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs_meta (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                table_name TEXT UNIQUE NOT NULL,
                command TEXT NOT NULL,
                policy TEXT,
                config_hash TEXT NOT NULL,
                seed INTEGER NOT NULL,
                created_at TIMESTAMP NOT NULL,
                row_count INTEGER NOT NULL
            )
        ''')
        cursor.execute('''
            CREATE INDEX IF NOT EXISTS idx_runs_command
            ON runs_meta(command, created_at)
        ''')

    def _init_database(self):
        conn = sqlite3.connect(self.db_path)
        try:
            self._create_meta(conn.cursor())
            conn.commit()
        finally:
            conn.close()

    def verify_db_integrity(self):
        self._verify_integrity()

    def _verify_integrity(self):
        """Drop runs_meta rows whose run table no longer exists"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        try:
            cursor.execute('SELECT table_name FROM runs_meta')
            for (table_name,) in cursor.fetchall():
                cursor.execute("SELECT name FROM sqlite_master WHERE type='table' AND name=?", (table_name,))
                if not cursor.fetchone():
                    self.logger.info(f"⚠ Deleting entry from runs_meta for non-existent table: {table_name}")
                    cursor.execute('DELETE FROM runs_meta WHERE table_name=?', (table_name,))
            conn.commit()
        except Exception as e:
            self.logger.info(f"⚠ Integrity check error: {e}")
            conn.rollback()
        finally:
            conn.close()

    def save_run(self, command: str, df: pd.DataFrame, config_hash: str, seed: int,
                 policy: str = None) -> str:
        """Store one result table; returns its table name, or "" on failure"""
        created = datetime.now(tz=timezone.utc)
        table_name = f"run_{command}_{policy or 'none'}_{created.strftime('%Y%m%d_%H%M%S_%f')}"
        table_name = re.sub(r'\W', '_', table_name)
        conn = sqlite3.connect(self.db_path)
        try:
            df.to_sql(table_name, conn, if_exists='replace', index=False)
            conn.execute('''
                INSERT INTO runs_meta (table_name, command, policy, config_hash, seed, created_at, row_count)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            ''', (table_name, command, policy, config_hash, int(seed), created.isoformat(), len(df)))
            conn.commit()
            self.logger.info(f"💾 Run saved: {table_name} ({len(df)} records)")
        except Exception as e:
            self.logger.error(f"❌ Error saving run: {e}")
            conn.rollback()
            table_name = ""
        finally:
            conn.close()
        return table_name

    def get_latest_runs(self, command: str = None, limit: int = 20) -> List[Tuple[str, str, str, int, datetime]]:
        """(table_name, policy, config_hash, seed, created_at), newest first"""
        conn = sqlite3.connect(self.db_path)
        try:
            query = 'SELECT table_name, policy, config_hash, seed, created_at FROM runs_meta'
            args: tuple = ()
            if command:
                query += ' WHERE command = ?'
                args = (command,)
            query += ' ORDER BY id DESC LIMIT ?'
            rows = conn.execute(query, args + (limit,)).fetchall()
            return [(t, p, h, s, datetime.fromisoformat(c)) for t, p, h, s, c in rows]
        finally:
            conn.close()

    def get_run_data(self, table_name: str) -> pd.DataFrame:
        conn = sqlite3.connect(self.db_path)
        try:
            cursor = conn.cursor()
            cursor.execute("SELECT name FROM sqlite_master WHERE type='table' AND name=?", (table_name,))
            if not cursor.fetchone():
                return pd.DataFrame()
            return pd.read_sql_query(f'SELECT * FROM "{table_name}"', conn)
        except Exception as e:
            self.logger.error(f"⚠ Error reading table {table_name}: {e}")
            return pd.DataFrame()
        finally:
            conn.close()

    def clear_all_data(self):
        """Drop every run table and empty runs_meta"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        try:
            cursor.execute("SELECT name FROM sqlite_master WHERE type='table'")
            tables = [row[0] for row in cursor.fetchall() if not row[0].startswith('sqlite_')]
            for table in tables:
                cursor.execute(f'DROP TABLE IF EXISTS "{table}"')
            self._create_meta(cursor)
            conn.commit()
            self.logger.info(f"✅ Database cleared. Deleted tables: {len(tables)}")
        except Exception as e:
            self.logger.error(f"❌ Error clearing database: {e}")
            conn.rollback()
        finally:
            conn.close()
