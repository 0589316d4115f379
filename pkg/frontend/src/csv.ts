import { readFileSync } from "fs";
import Papa from "papaparse";

export interface Table {
  path: string;
  columns: string[];
  rows: Record<string, number | null>[];
}

/** Parse a simulator CSV: numeric cells, empty cells become null. */
export function readCsv(path: string): Table {
  const text = readFileSync(path, "utf8");
  const parsed = Papa.parse<Record<string, string>>(text.trim(), {
    header: true,
    skipEmptyLines: true,
  });
  if (parsed.errors.length > 0) {
    const e = parsed.errors[0];
    throw new Error(`${path}: CSV parse error at row ${e.row}: ${e.message}`);
  }
  const columns = parsed.meta.fields ?? [];
  const rows = parsed.data.map((raw) => {
    const row: Record<string, number | null> = {};
    for (const col of columns) {
      const cell = raw[col];
      if (cell === undefined || cell === "") {
        row[col] = null;
      } else {
        const v = Number(cell);
        if (Number.isNaN(v)) {
          throw new Error(`${path}: non-numeric cell ${JSON.stringify(cell)} in column ${col}`);
        }
        row[col] = v;
      }
    }
    return row;
  });
  return { path, columns, rows };
}

/** Raise a schema error naming the first missing column. */
export function requireColumns(table: Table, needed: string[]): void {
  for (const col of needed) {
    if (!table.columns.includes(col)) {
      throw new Error(`${table.path}: missing required column "${col}"`);
    }
  }
}

export function numbers(table: Table, col: string): number[] {
  return table.rows
    .map((r) => r[col])
    .filter((v): v is number => v !== null);
}

/** Distinct values of a column, in first-appearance order. */
export function distinct(table: Table, col: string): number[] {
  const seen = new Set<number>();
  const out: number[] = [];
  for (const row of table.rows) {
    const v = row[col];
    if (v !== null && !seen.has(v)) {
      seen.add(v);
      out.push(v);
    }
  }
  return out;
}
