import { readFileSync, writeFileSync } from "fs";
import { pathToFileURL } from "url";
import { FigureSpec, legendLabels, renderFigure, validateSpec } from "./figures.js";

function usage(): never {
  console.error("usage: node dist/render.js --spec FIGURE_SPEC.json");
  process.exit(2);
}

export function main(argv: string[]): number {
  const idx = argv.indexOf("--spec");
  if (idx === -1 || idx + 1 >= argv.length) usage();
  const specPath = argv[idx + 1];
  let parsed: unknown;
  try {
    parsed = JSON.parse(readFileSync(specPath, "utf8"));
  } catch (err) {
    console.error(`cannot read figure spec ${specPath}: ${(err as Error).message}`);
    return 2;
  }
  const specs: FigureSpec[] = [];
  try {
    if (Array.isArray(parsed)) {
      parsed.forEach((obj, i) => specs.push(validateSpec(obj, `spec[${i}]`)));
    } else {
      specs.push(validateSpec(parsed));
    }
  } catch (err) {
    console.error((err as Error).message);
    return 2;
  }
  for (const spec of specs) {
    let svg: string;
    try {
      svg = renderFigure(spec);
    } catch (err) {
      console.error((err as Error).message);
      return 1;
    }
    writeFileSync(spec.output, svg);
    const labels = legendLabels(svg);
    const suffix = labels.length > 0 ? ` legend: ${labels.join(", ")}` : "";
    console.log(`wrote ${spec.output} (${spec.kind})${suffix}`);
  }
  return 0;
}

const invokedDirectly =
  process.argv[1] !== undefined &&
  import.meta.url === pathToFileURL(process.argv[1]).href;
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
