#pragma once

// A trained run on disk: model weights, the PCA projection used to build Ṽ,
// and the settings needed to rerun inference. Stored as one SJWT table.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "liealign/binary_io.hpp"
#include "liealign/features.hpp"
#include "liealign/nets.hpp"
#include "liealign/tensor_file.hpp"
#include "liealign/training.hpp"

namespace liealign {

struct Checkpoint {
  Model<float> model;
  PcaModel pca;
  GroupFamily family = GroupFamily::SL3;
  int recurrences = 5;
  bool flips = false;
  Parameterization parameterization = Parameterization::lie;

  [[nodiscard]] AlignOptions align_options(int threads = 1) const {
    AlignOptions o;
    o.family = family;
    o.recurrences = recurrences;
    o.flips = flips;
    o.parameterization = parameterization;
    o.threads = threads;
    return o;
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(Checkpoint& ck) {
  auto tensors = model_tensors(ck.model);
  for (auto& t : pca_tensors(ck.pca)) tensors.push_back(std::move(t));
  const auto meta = [&](const std::string& name, double v) {
    tensors.push_back({"meta." + name, {1}, {static_cast<float>(v)}});
  };
  meta("family", static_cast<int>(ck.family));
  meta("recurrences", ck.recurrences);
  meta("flips", ck.flips ? 1 : 0);
  meta("direct_matrix", ck.parameterization == Parameterization::direct_matrix ? 1 : 0);
  return encode_tensors(tensors);
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto tensors = decode_tensors(bytes);
  Checkpoint ck;
  ck.model = model_from_tensors(tensors);
  ck.pca = pca_from_tensors(tensors);
  const auto meta = [&](const std::string& name) { return find_tensor(tensors, "meta." + name).values.at(0); };
  const int family = static_cast<int>(meta("family"));
  if (family < 0 || family > 2) throw Error(ErrorCode::format, "checkpoint has an unknown group family");
  ck.family = static_cast<GroupFamily>(family);
  ck.recurrences = static_cast<int>(meta("recurrences"));
  ck.flips = meta("flips") != 0.0F;
  ck.parameterization = meta("direct_matrix") != 0.0F ? Parameterization::direct_matrix : Parameterization::lie;
  if (ck.pca.k() != ck.model.ae.channels) {
    throw Error(ErrorCode::format, "checkpoint PCA width does not match the autoencoder input");
  }
  return ck;
}

/// FNV-1a of the serialised checkpoint, as 16 hex digits.
inline std::string checkpoint_hash(std::span<const std::uint8_t> bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(binary::fnv1a(bytes)));
  return buf;
}

}  // namespace liealign
