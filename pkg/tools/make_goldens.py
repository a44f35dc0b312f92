"""Regenerate the frozen golden summaries used in the unit tests."""
import torch
torch.set_num_threads(4)
from texwarp import dae, gan

torch.manual_seed(0)
m32 = dae.Dae(dae.DaeConfig(image_size=32))

code = m32.encode(torch.zeros(1, 3, 32, 32))
print("encode_abs_sum:", float(torch.cat([code.z_shading, code.z_albedo, code.z_deform], 1).abs().sum()))

torch.manual_seed(1)
c = dae.LatentCode(torch.randn(1, 32), torch.randn(1, 64), torch.randn(1, 32))
s, a, _ = m32.decode_components(c)
print("shading_mean:", float(s.mean()))
print("albedo_mean:", float(a.mean()))

torch.manual_seed(2)
x = torch.rand(1, 3, 32, 32)
out = m32(x)
print("forward_recon_mean:", float(out.reconstruction.mean()))

cfg = gan.GanConfig(image_size=64, n_labels=5, label_mode="multi_binary")
torch.manual_seed(0)
G = gan.Generator(cfg)
torch.manual_seed(0)
D = gan.Discriminator(cfg)
torch.manual_seed(3)
t = torch.rand(1, 3, 64, 64)
print("generator_mean:", float(G(t, torch.tensor([[1.,0.,1.,0.,1.]])).mean()))
torch.manual_seed(4)
print("disc_src_sum:", float(D(gan.image_batch(torch.rand(1,3,64,64))).src_logits.sum()))

# identity extractor golden
from texwarp import identity as idm
ext = idm.build_extractor(idm.ExtractorConfig(kind="seeded_random_convnet", image_size=32), seed=0)
e = ext.embed(torch.zeros(1,3,32,32))
print("extractor_dim:", e.shape[1])
print("extractor_abs_sum:", float(e.abs().sum()))
