#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "buckle/gnn.hpp"

namespace buckle {

inline constexpr std::uint32_t kModelBlobVersion = 1;

/// Layout: 8-byte magic "BKLGNN01", u32 version, u32 header length, JSON
/// header, then every tensor as little-endian doubles in header order.
/// `meta_json` must be a JSON object; it is embedded under "meta".
void write_model_blob(std::ostream& out, const ModelParams& params,
                      const std::string& meta_json = "{}");

/// Returns the parameters and the embedded meta object (as JSON text).
std::pair<ModelParams, std::string> read_model_blob(std::istream& in);

/// CSV with header "epoch,train_loss,val_acc".
void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);
std::vector<EpochRecord> read_history_csv(std::istream& in);

}  // namespace buckle
