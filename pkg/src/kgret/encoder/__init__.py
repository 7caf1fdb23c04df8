from kgret.encoder.model import EncoderDims, EncoderModel, backward, embed, embed_texts
from kgret.encoder.tokenizer import BOS, EOS, PAD, UNK, Tokenizer, train_tokenizer

__all__ = [
    "BOS", "EOS", "PAD", "UNK", "EncoderDims", "EncoderModel", "Tokenizer",
    "backward", "embed", "embed_texts", "train_tokenizer",
]
