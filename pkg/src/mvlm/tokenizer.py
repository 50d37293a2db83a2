"""Byte-level tokenizer: ids 0-255 are UTF-8 bytes, then pad/bos/eos."""

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259


class ByteTokenizer:
    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list:
        return list(text.encode("utf-8"))

    def encode_target(self, text: str, max_len: int | None = None) -> list:
        ids = self.encode(text) + [EOS_ID]
        if max_len is not None and len(ids) > max_len:
            ids = ids[:max_len]
        return ids

    def decode(self, ids) -> str:
        out = bytearray()
        for t in ids:
            t = int(t)
            if t == EOS_ID:
                break
            if t < 256:
                out.append(t)
        return out.decode("utf-8", errors="replace")
