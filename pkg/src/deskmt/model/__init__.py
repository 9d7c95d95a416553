"""Conditional sequence models; see base for the shared conventions."""

from .attention import AttentionModel
from .base import Seq2SeqModel, emission_mask
from .decoding import NBestItem, NBestList, beam_search, decode_r2l, load_nbest, save_nbest
from .params import ModelParams, average_checkpoints
from .tabular import TabularModel


def enumerate_translations(model, x, max_len=None, include_unterminated=False):
    return model.enumerate_translations(x, max_len, include_unterminated)
