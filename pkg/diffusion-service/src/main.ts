import { EchoBackend, ModelBackend, NoiseBackend } from './backend';
import { buildService } from './app';
import { parseConfig } from './config';

function main(): void {
  let config;
  try {
    config = parseConfig(process.argv.slice(2));
  } catch (err) {
    console.error((err as Error).message);
    process.exit(2);
  }
  const backend: NoiseBackend =
    config.mode === 'echo'
      ? new EchoBackend()
      : new ModelBackend(config.modelId, config.guidanceScale);
  const { app } = buildService(config, backend);
  const server = app.listen(config.port, config.host, () => {
    const addr = server.address();
    const port = typeof addr === 'object' && addr !== null ? addr.port : config.port;
    console.log(`noise-prediction service (${config.mode}) on ${config.host}:${port}`);
  });
  for (const signal of ['SIGINT', 'SIGTERM'] as const) {
    process.on(signal, () => server.close(() => process.exit(0)));
  }
}

main();
