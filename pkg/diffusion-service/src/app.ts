import express, { Express, NextFunction, Request, Response } from 'express';
import { ZodError } from 'zod';
import { NoiseBackend } from './backend';
import { ServiceConfig } from './config';
import { firstIssuePath, noisePredictionSchema } from './schema';
import { PayloadError } from './tensor';

type ReadyState = 'loading' | 'ok' | 'error';

export interface Service {
  app: Express;
  state(): ReadyState;
}

/**
 * Assemble the express app around one backend. The backend's load()
 * starts here but is not awaited: health answers 503 until it settles,
 * which is what a client polling during startup should see.
 */
export function buildService(config: ServiceConfig, backend: NoiseBackend): Service {
  let ready: ReadyState = 'loading';
  let loadError = '';
  backend.load().then(
    () => {
      ready = 'ok';
    },
    (err: Error) => {
      ready = 'error';
      loadError = err.message;
      console.error(`backend load failed: ${err.message}`);
    },
  );

  const app = express();
  app.use(express.json({ limit: config.requestSizeLimit }));

  app.use((req: Request, res: Response, next: NextFunction) => {
    const started = process.hrtime.bigint();
    res.on('finish', () => {
      const ms = Number(process.hrtime.bigint() - started) / 1e6;
      console.log(`${req.method} ${req.path} ${res.statusCode} ${ms.toFixed(1)}ms`);
    });
    next();
  });

  app.get('/v1/health', (_req: Request, res: Response) => {
    if (ready === 'ok') {
      res.json({ status: 'ok', model: backend.modelName });
    } else {
      res.status(503).json({
        status: ready,
        model: backend.modelName,
        ...(loadError ? { detail: loadError } : {}),
      });
    }
  });

  app.post('/v1/noise-prediction', (req: Request, res: Response) => {
    if (ready !== 'ok') {
      res.status(503).json({ error: `model '${backend.modelName}' is not ready` });
      return;
    }
    const parsed = noisePredictionSchema.safeParse(req.body);
    if (!parsed.success) {
      const field = firstIssuePath(parsed.error);
      res.status(400).json({ error: `invalid request: ${field}`, field });
      return;
    }
    try {
      const epsilon = backend.predict(parsed.data);
      res.json({ epsilon });
    } catch (err) {
      if (err instanceof PayloadError) {
        res.status(400).json({ error: err.message, field: err.field });
      } else {
        res.status(503).json({ error: (err as Error).message });
      }
    }
  });

  app.use((err: Error, _req: Request, res: Response, next: NextFunction) => {
    if (res.headersSent) {
      next(err);
      return;
    }
    if (err instanceof ZodError) {
      res.status(400).json({ error: `invalid request: ${firstIssuePath(err)}` });
    } else if ((err as { type?: string }).type === 'entity.too.large') {
      res.status(413).json({ error: 'request body exceeds the configured size limit' });
    } else if (err instanceof SyntaxError) {
      res.status(400).json({ error: 'request body is not valid JSON' });
    } else {
      res.status(500).json({ error: err.message });
    }
  });

  return { app, state: () => ready };
}
