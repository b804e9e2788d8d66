/**
 * Character-level tokenizer driven by the model manifest.
 *
 * The vocabulary is an ordered string of unique characters; token id is the
 * character's position in it. Encoding is strict: a character outside the
 * vocabulary is an error rather than a silent substitution, since a trace
 * recorded over mangled input would be misleading.
 */

export class TokenizerError extends Error {}

export interface TokenizerSpec {
  type: string;
  chars: string;
}

export class CharTokenizer {
  readonly chars: string;
  private readonly ids: Map<string, number>;

  constructor(spec: TokenizerSpec) {
    if (spec.type !== "char") {
      throw new TokenizerError(`unsupported tokenizer type ${spec.type}`);
    }
    this.chars = spec.chars;
    this.ids = new Map();
    for (let i = 0; i < spec.chars.length; i++) {
      const c = spec.chars[i];
      if (this.ids.has(c)) {
        throw new TokenizerError(`duplicate character ${JSON.stringify(c)} in vocabulary`);
      }
      this.ids.set(c, i);
    }
    if (this.ids.size === 0) {
      throw new TokenizerError("empty vocabulary");
    }
  }

  get vocabSize(): number {
    return this.ids.size;
  }

  encode(text: string): Int32Array {
    const out = new Int32Array(text.length);
    for (let i = 0; i < text.length; i++) {
      const id = this.ids.get(text[i]);
      if (id === undefined) {
        throw new TokenizerError(
          `character ${JSON.stringify(text[i])} at offset ${i} is not in the model vocabulary`,
        );
      }
      out[i] = id;
    }
    return out;
  }

  decode(ids: ArrayLike<number>): string {
    let out = "";
    for (let i = 0; i < ids.length; i++) {
      const id = ids[i];
      if (!Number.isInteger(id) || id < 0 || id >= this.chars.length) {
        throw new TokenizerError(`token id ${id} out of range`);
      }
      out += this.chars[id];
    }
    return out;
  }
}
