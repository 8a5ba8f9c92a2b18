/**
 * The classification network behind the protocol.
 *
 * By default a compact seeded CNN (conv/pool stack with a softmax head,
 * AlexNet-flavored strides at full input size) is built in-process:
 * every initializer carries a fixed seed, so outputs are deterministic
 * run to run. A tfjs LayersModel saved on disk can be loaded instead and
 * its head is expected to match the declared class count.
 */

import * as tf from '@tensorflow/tfjs';

export interface ModelConfig {
  classes: string[];
  inputSize: [number, number];
  modelPath?: string;
  seed: number;
}

export async function loadModel(config: ModelConfig): Promise<tf.LayersModel> {
  if (config.modelPath) {
    const model = await tf.loadLayersModel(`file://${config.modelPath}`);
    const out = model.outputs[0].shape;
    if (out[out.length - 1] !== config.classes.length) {
      throw new Error(
        `model head emits ${out[out.length - 1]} classes, expected ${config.classes.length}`,
      );
    }
    return model;
  }
  return buildSeededCnn(config);
}

export function buildSeededCnn(config: ModelConfig): tf.LayersModel {
  const [w, h] = config.inputSize;
  const seed = config.seed;
  const model = tf.sequential();
  const side = Math.min(w, h);
  if (side >= 64) {
    model.add(tf.layers.conv2d({
      inputShape: [h, w, 3], filters: 8, kernelSize: 11, strides: 4, activation: 'relu',
      kernelInitializer: tf.initializers.glorotUniform({ seed }),
      biasInitializer: 'zeros',
    }));
    model.add(tf.layers.maxPooling2d({ poolSize: 3, strides: 2 }));
    model.add(tf.layers.conv2d({
      filters: 16, kernelSize: 5, strides: 2, activation: 'relu',
      kernelInitializer: tf.initializers.glorotUniform({ seed: seed + 1 }),
      biasInitializer: 'zeros',
    }));
    model.add(tf.layers.maxPooling2d({ poolSize: 2, strides: 2 }));
  } else {
    model.add(tf.layers.conv2d({
      inputShape: [h, w, 3], filters: 8, kernelSize: 3, strides: 1, padding: 'same',
      activation: 'relu',
      kernelInitializer: tf.initializers.glorotUniform({ seed }),
      biasInitializer: 'zeros',
    }));
    if (side >= 4) {
      model.add(tf.layers.maxPooling2d({ poolSize: 2, strides: 2 }));
    }
  }
  model.add(tf.layers.flatten());
  model.add(tf.layers.dense({
    units: config.classes.length, activation: 'softmax',
    kernelInitializer: tf.initializers.glorotUniform({ seed: seed + 2 }),
    biasInitializer: 'zeros',
  }));
  return model;
}

/** Run a batch of [h, w, 3] pixel buffers through the model. */
export function predictBatch(
  model: tf.LayersModel,
  images: Float32Array[],
  inputSize: [number, number],
): number[][] {
  const [w, h] = inputSize;
  return tf.tidy(() => {
    const batch = tf.tensor4d(
      images.reduce((acc, img, i) => {
        acc.set(img, i * img.length);
        return acc;
      }, new Float32Array(images.length * h * w * 3)),
      [images.length, h, w, 3],
    );
    const probs = model.predict(batch) as tf.Tensor2D;
    return probs.arraySync();
  });
}
