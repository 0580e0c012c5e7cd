import { z } from 'zod';

const tensorSchema = z.object({
  shape: z.array(z.number().int().positive()).min(1),
  dtype: z.literal('f32le'),
  data_b64: z.string(),
});

export const noisePredictionSchema = z
  .object({
    t: z.number().int().nonnegative(),
    delta_camera: z
      .object({
        azimuth_deg: z.number(),
        elevation_deg: z.number(),
        radius: z.number(),
      })
      .strict(),
    z_t: tensorSchema,
    condition: tensorSchema,
  })
  .strict();

export type NoisePredictionRequest = z.infer<typeof noisePredictionSchema>;

/** First offending field as a dotted path, for 400 bodies. */
export function firstIssuePath(error: z.ZodError): string {
  const issue = error.issues[0];
  return issue && issue.path.length > 0 ? issue.path.join('.') : '(request body)';
}
