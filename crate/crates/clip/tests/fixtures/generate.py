"""Regenerates the tiny CLIP fixture used by the adkit-clip tests.

Requires torch, transformers and tokenizers. Run from this directory.
"""
import json

import numpy as np
import torch
from tokenizers import Tokenizer, models, pre_tokenizers, processors, normalizers
from transformers import CLIPConfig, CLIPModel

torch.manual_seed(7)

words = ["a", "photo", "of", "the", "bottle", "flawless", "damaged", "with", "flaw", "metal", "nut"]
vocab = {"<|unk|>": 0}
for w in words:
    vocab[w] = len(vocab)
vocab["<|startoftext|>"] = len(vocab)
vocab["<|endoftext|>"] = len(vocab)
tok = Tokenizer(models.WordLevel(vocab, unk_token="<|unk|>"))
tok.normalizer = normalizers.Lowercase()
tok.pre_tokenizer = pre_tokenizers.Whitespace()
tok.post_processor = processors.TemplateProcessing(
    single="<|startoftext|> $A <|endoftext|>",
    special_tokens=[("<|startoftext|>", vocab["<|startoftext|>"]), ("<|endoftext|>", vocab["<|endoftext|>"])],
)
tok.save("tokenizer.json")

config = CLIPConfig(
    text_config=dict(
        vocab_size=len(vocab),
        hidden_size=24,
        intermediate_size=48,
        num_hidden_layers=2,
        num_attention_heads=3,
        max_position_embeddings=16,
        hidden_act="quick_gelu",
        bos_token_id=vocab["<|startoftext|>"],
        eos_token_id=vocab["<|endoftext|>"],
        pad_token_id=vocab["<|endoftext|>"],
    ),
    vision_config=dict(
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=4,
        num_attention_heads=4,
        image_size=32,
        patch_size=8,
        hidden_act="quick_gelu",
    ),
    projection_dim=16,
)
model = CLIPModel(config).eval()
with torch.no_grad():
    for p in model.parameters():
        p.add_(0.02 * torch.randn_like(p))
model.save_pretrained(".", safe_serialization=True)

mean = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
std = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)
side = 48
rng = np.random.default_rng(3)
image = rng.random((side, side, 3), dtype=np.float32)
pixel = torch.from_numpy(((image - mean) / std).transpose(2, 0, 1)[None].copy())

with torch.no_grad():
    out = model.vision_model(pixel_values=pixel, output_hidden_states=True, interpolate_pos_encoding=True)
    grid = side // 8
    stages = [out.hidden_states[layer][0, 1:].reshape(grid, grid, -1).numpy() for layer in (1, 2, 3, 4)]
    cls = model.visual_projection(out.pooler_output)[0]
    cls = (cls / cls.norm()).numpy()

    sentences = ["a photo of the flawless bottle", "a photo of the damaged metal nut with flaw"]
    text = []
    for s in sentences:
        ids = torch.tensor([tok.encode(s).ids])
        t = model.text_model(input_ids=ids)
        text.append(model.text_projection(t.pooler_output)[0].numpy().tolist())

    pos = model.vision_model.embeddings.position_embedding.weight[1:].reshape(1, 4, 4, -1).permute(0, 3, 1, 2)
    pos6 = torch.nn.functional.interpolate(pos, size=(6, 6), mode="bicubic", align_corners=False)

json.dump(
    {
        "side": side,
        "image": image.reshape(-1).tolist(),
        "stages": [s.reshape(-1).tolist() for s in stages],
        "class_embedding": cls.tolist(),
        "sentences": sentences,
        "text": text,
        "pos_interpolated": pos6[0].permute(1, 2, 0).reshape(-1).tolist(),
    },
    open("expected.json", "w"),
)
