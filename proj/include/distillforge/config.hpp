#pragma once

#include <array>
#include <string>
#include <vector>

namespace distillforge {

enum class StageId { DW1, DW2, DW3, MID, UP1, UP2, UP3 };

constexpr std::array<StageId, 7> kAllStages = {StageId::DW1, StageId::DW2, StageId::DW3,
                                               StageId::MID, StageId::UP1, StageId::UP2,
                                               StageId::UP3};

const char* stage_name(StageId s);         // "DW-1", "MID", ...
const char* stage_prefix(StageId s);       // "dw1", "mid", ... (parameter name prefix)
StageId stage_from_name(const std::string& name);
bool stage_is_encoder(StageId s);
bool stage_is_decoder(StageId s);
/// Resolution level 0..2 (0 = full resolution); MID sits at level 2.
int stage_level(StageId s);

/// Staged denoising U-Net description. Three resolution levels; DW-i and
/// UP-(4-i) share a level, MID sits at the lowest one. Encoder stages hold
/// tx_pairs_encoder alternating (res block, transformer stack) pairs and
/// decoder stages tx_pairs_decoder of them; a stack is omitted at levels
/// where tx_depths is 0. Skip connections concatenate channels, which
/// requires tx_pairs_decoder == tx_pairs_encoder + 1.
struct UNetConfig {
    long in_channels = 3;
    long out_channels = 3;
    long base_channels = 32;
    std::vector<long> channel_mults = {1, 2, 4};  // one per level
    std::vector<long> tx_depths = {0, 2, 4};      // transformer layers per stack, per level
    long tx_pairs_encoder = 2;
    long tx_pairs_decoder = 3;
    bool mid_enabled = true;
    long mid_tx_depth = 4;
    long head_dim = 8;
    long context_dim = 32;
    long time_embed_dim = 128;

    long channels(int level) const { return base_channels * channel_mults[static_cast<std::size_t>(level)]; }
    long depth(int level) const { return tx_depths[static_cast<std::size_t>(level)]; }
    /// Throws std::invalid_argument naming the offending stage/field.
    void validate() const;
    bool operator==(const UNetConfig&) const = default;
};

/// JSON layout uses exactly the field names above; unknown keys are rejected.
std::string unet_config_to_json(const UNetConfig& cfg);
UNetConfig unet_config_from_json(const std::string& json_text);
UNetConfig load_unet_config(const std::string& path);
void save_unet_config(const UNetConfig& cfg, const std::string& path);

/// Group count used by every GroupNorm in the model: gcd(channels, 32).
long norm_groups(long channels);

}  // namespace distillforge
