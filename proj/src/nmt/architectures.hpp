#pragma once

#include "fidelity/nmt/model.hpp"

namespace fidelity::nmt::detail {

std::unique_ptr<NmtModel> make_transformer(ModelDims dims, int source_vocab, int target_vocab,
                                           std::uint64_t seed);
std::unique_ptr<NmtModel> make_rnn_search(ModelDims dims, int source_vocab, int target_vocab,
                                          std::uint64_t seed);

}  // namespace fidelity::nmt::detail
